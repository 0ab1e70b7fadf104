//! Oracle checks behind the `verify` command; one JSONL record per check.

use rayon::prelude::*;
use serde::Serialize;
use upo_core::denoiser::{Denoiser, TaskDenoiser};
use upo_core::oracle::{
    exact_output_grad, exact_token_grad, fixed_point, kl_to_ideal, lemma1_dynamics, max_relative_error, prop3_check,
    terminal_dist, terminal_dist_with, terminal_kl, trajectory_kl, TerminalDistribution,
};
use upo_core::policy::{grad_log_policy, FeatureVector, Init, LearnedPolicy, PolicyMode, ScorerParams};
use upo_core::seq::{lattice_size, MaskedSeq, DEFAULT_ENUMERATION_CAP};
use upo_core::tasks::{RewardKind, TaskFamily, TaskInstance};
use upo_core::unmask::{Heuristic, UnmaskPolicy};
use upo_core::{derive_seed, stream_rng};

use crate::config::{ExperimentConfig, SchedulerName};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRecord {
    pub check_id: String,
    /// Index in the evaluation stream, or `None` for instance-free checks.
    pub instance: Option<u64>,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl VerifyRecord {
    fn at_most(check: &str, instance: Option<u64>, value: f64, bound: f64) -> Self {
        Self { check_id: check.into(), instance, value, bound, pass: value <= bound }
    }
}

/// Lattice limits for the more expensive checks.
const GRADIENT_STATES: u128 = 10_000;
const FD_KL_STATES: u128 = 1_000;

pub const R_REF_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const BETA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// Fixed-point convergence and `r* > r_ref` over the standard grid.
pub fn fixed_point_grid(eps_adv: f64) -> Vec<VerifyRecord> {
    let mut out = Vec::new();
    for r_ref in R_REF_GRID {
        for beta in BETA_GRID {
            let rep = fixed_point(r_ref, beta, eps_adv, 1e-12, 100_000).expect("grid points are valid");
            out.push(VerifyRecord {
                check_id: format!("fixed-point r_ref={r_ref} beta={beta}"),
                instance: None,
                value: rep.r_star - r_ref,
                bound: 0.0,
                pass: rep.converged && rep.r_star > r_ref,
            });
        }
    }
    out
}

fn random_scorer(feature_k: usize, hidden: usize, mode: PolicyMode, seed: u64) -> LearnedPolicy {
    let p = ScorerParams::init(FeatureVector::dim(feature_k), hidden, Init::Uniform, &mut stream_rng(seed, 0));
    LearnedPolicy::new(p, mode, feature_k).expect("shapes agree")
}

/// Shared check context for one instance.
struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    index: u64,
    inst: &'a TaskInstance,
    seed: u64,
}

impl Ctx<'_> {
    fn den(&self) -> TaskDenoiser<'_> {
        TaskDenoiser::new(self.inst, self.cfg.denoiser).expect("validated config")
    }

    fn states(&self) -> u128 {
        lattice_size(self.inst.len(), self.inst.vocab())
    }

    fn heuristics(&self) -> Vec<Heuristic> {
        let mut hs: Vec<Heuristic> = self
            .cfg
            .schedulers
            .iter()
            .filter_map(|s| match s {
                SchedulerName::Heuristic(h) => Some(*h),
                SchedulerName::Learned(_) => None,
            })
            .collect();
        if hs.is_empty() {
            hs = vec![Heuristic::Random, Heuristic::Confidence, Heuristic::TopK { k: 2 }];
        }
        hs
    }

    fn modes(&self) -> [PolicyMode; 2] {
        [PolicyMode::FullSoftmax, PolicyMode::TopkRestricted { k: 2 }]
    }

    fn check(&self, id: &str, value: f64, bound: f64) -> VerifyRecord {
        VerifyRecord::at_most(id, Some(self.index), value, bound)
    }

    fn failed(&self, id: &str, err: impl std::fmt::Display) -> VerifyRecord {
        eprintln!("{id} on instance {}: {err}", self.index);
        VerifyRecord { check_id: id.into(), instance: Some(self.index), value: f64::NAN, bound: 0.0, pass: false }
    }

    fn run(&self) -> Vec<VerifyRecord> {
        let mut out = Vec::new();
        if self.states() > DEFAULT_ENUMERATION_CAP as u128 {
            out.push(self.check("enumerable", self.states() as f64, DEFAULT_ENUMERATION_CAP as f64));
            return out;
        }
        let exact = TaskDenoiser::exact(self.inst);
        match terminal_dist(self.inst, &Heuristic::Random, &exact) {
            Ok(p) => out.push(self.check(
                "exact-sampling-tv",
                p.total_variation(&TerminalDistribution::data(self.inst)),
                1e-10,
            )),
            Err(e) => out.push(self.failed("exact-sampling-tv", e)),
        }
        let den = self.den();
        for h in self.heuristics() {
            let id = format!("terminal-mass {h}");
            match terminal_dist_with(self.inst, &h, &den, self.cfg.block.as_ref(), self.cfg.decoding) {
                Ok(p) => out.push(self.check(&id, (p.total() - 1.0).abs(), 1e-9)),
                Err(e) => out.push(self.failed(&id, e)),
            }
        }
        out.extend(self.kl_bound(&den));
        if self.states() <= GRADIENT_STATES {
            out.extend(self.scorer_fd(&den));
            out.extend(self.gradient_alignment(&den));
        }
        if self.states() <= FD_KL_STATES {
            out.extend(self.kl_gradient(&den));
        }
        if self.inst.reward_kind() == RewardKind::BinaryExact {
            out.extend(self.kl_tightening(&den));
        }
        out
    }

    fn kl_bound(&self, den: &TaskDenoiser<'_>) -> Vec<VerifyRecord> {
        let pairs = [
            (Heuristic::Softmax { tau: 0.5 }, Heuristic::Softmax { tau: 2.0 }),
            (Heuristic::Confidence, Heuristic::Random),
            (Heuristic::TopK { k: 2 }, Heuristic::Random),
        ];
        pairs
            .iter()
            .map(|(g1, g2)| {
                let id = format!("kl-bound {g1} || {g2}");
                let r = (|| {
                    let p1 = terminal_dist(self.inst, g1, den)?;
                    let p2 = terminal_dist(self.inst, g2, den)?;
                    Ok::<_, upo_core::Error>(terminal_kl(&p1, &p2)? - trajectory_kl(self.inst, g1, g2, den)?)
                })();
                match r {
                    Ok(v) => self.check(&id, v, 1e-12),
                    Err(e) => self.failed(&id, e),
                }
            })
            .collect()
    }

    fn scorer_fd(&self, den: &TaskDenoiser<'_>) -> Vec<VerifyRecord> {
        let k = self.cfg.train.feature_k;
        let mut out = Vec::new();
        for mode in self.modes() {
            let mut worst: f64 = 0.0;
            let mut zero_mean: f64 = 0.0;
            for d in 0..self.cfg.verify.draws as u64 {
                let pol = random_scorer(k, self.cfg.verify.hidden, mode, derive_seed(self.seed, d));
                let x = random_state(self.inst, derive_seed(self.seed, 1000 + d));
                let Ok(dist) = pol.distribution(&x, &den.table(&x).expect("valid state")) else { continue };
                let mut mean = pol.params.zero_grad();
                for &(a, q) in dist.entries().iter().filter(|e| e.1 > 0.0) {
                    let g = grad_log_policy(&pol.params, mode, k, den, &x, a).expect("a in support");
                    mean.add_scaled(&g, q);
                    let fd: Vec<f64> = (0..pol.params.len())
                        .map(|i| {
                            let h = 1e-5;
                            let lp = |s: f64| {
                                let mut p = pol.clone();
                                p.params.values_mut()[i] += s;
                                p.distribution(&x, &den.table(&x).unwrap()).unwrap().prob(a).ln()
                            };
                            (lp(h) - lp(-h)) / (2.0 * h)
                        })
                        .collect();
                    worst = worst.max(max_relative_error(&g.0, &fd));
                }
                zero_mean = zero_mean.max(mean.max_abs());
            }
            out.push(self.check(&format!("scorer-fd {}", mode_label(mode)), worst, 1e-5));
            out.push(self.check(&format!("score-zero-mean {}", mode_label(mode)), zero_mean, 1e-8));
        }
        out
    }

    fn gradient_alignment(&self, den: &TaskDenoiser<'_>) -> Vec<VerifyRecord> {
        let mut out = Vec::new();
        for mode in self.modes() {
            let id = format!("gradient-alignment {}", mode_label(mode));
            let mut worst: f64 = 0.0;
            for d in 0..self.cfg.verify.draws as u64 {
                let pol = random_scorer(
                    self.cfg.train.feature_k,
                    self.cfg.verify.hidden,
                    mode,
                    derive_seed(self.seed, 2000 + d),
                );
                let r = exact_output_grad(self.inst, &pol, den, self.cfg.train.eps_adv)
                    .and_then(|a| Ok((a, exact_token_grad(self.inst, &pol, den, self.cfg.train.eps_adv)?)));
                match r {
                    Ok((a, b)) => {
                        worst = worst.max(a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                    }
                    Err(e) => return vec![self.failed(&id, e)],
                }
            }
            out.push(self.check(&id, worst, 1e-8));
        }
        out
    }

    fn kl_gradient(&self, den: &TaskDenoiser<'_>) -> Vec<VerifyRecord> {
        let refs = [Heuristic::Softmax { tau: 0.5 }, Heuristic::TopK { k: 2 }];
        self.modes()
            .iter()
            .zip(refs)
            .map(|(&mode, reference)| {
                let id = format!("kl-gradient {}", mode_label(mode));
                let mut worst: f64 = 0.0;
                for d in 0..self.cfg.verify.draws as u64 {
                    let k = self.cfg.train.feature_k;
                    let pol = random_scorer(k, self.cfg.verify.hidden, mode, derive_seed(self.seed, 3000 + d));
                    let old = random_scorer(k, self.cfg.verify.hidden, mode, derive_seed(self.seed, 4000 + d));
                    match prop3_check(self.inst, &pol, &old.params, &reference, den, 1e-5) {
                        Ok(rep) => worst = worst.max(rep.rel_err),
                        Err(e) => return self.failed(&id, e),
                    }
                }
                self.check(&id, worst, 1e-4)
            })
            .collect()
    }

    fn kl_tightening(&self, den: &TaskDenoiser<'_>) -> Vec<VerifyRecord> {
        let data = TerminalDistribution::data(self.inst);
        let mut out = Vec::new();
        let refs = [
            Heuristic::TopK { k: 2 },
            Heuristic::TopK { k: 3 },
            Heuristic::Softmax { tau: 0.1 },
            Heuristic::Softmax { tau: 1.0 },
        ];
        for h in refs {
            let Ok(p_ref) = terminal_dist(self.inst, &h, den) else { continue };
            let Ok(base) = kl_to_ideal(self.inst, &p_ref) else { continue };
            let beta = 1.0;
            let Ok(run) = lemma1_dynamics(self.inst, &p_ref, beta, self.cfg.train.eps_adv, 200) else { continue };
            let fp = fixed_point(run.rates[0], beta, self.cfg.train.eps_adv, 0.0, 200).expect("rate in (0, 1)");
            let drift = run.rates.iter().zip(&fp.iterates).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.push(self.check(&format!("rate-consistency {h}"), drift, 1e-9));
            let limit = run.dists.last().expect("nonempty");
            match terminal_kl(&data, limit) {
                Ok(kl) => out.push(self.check(&format!("kl-tightening {h}"), kl - base, 1e-9)),
                Err(e) => out.push(self.failed(&format!("kl-tightening {h}"), e)),
            }
        }
        out
    }
}

fn mode_label(mode: PolicyMode) -> String {
    match mode {
        PolicyMode::FullSoftmax => "full-softmax".into(),
        PolicyMode::TopkRestricted { k } => format!("topk-restricted:{k}"),
    }
}

/// A random subset of positions revealed to the tokens of a random answer,
/// so the state is on the data support for every denoiser.
pub fn random_state(inst: &TaskInstance, seed: u64) -> MaskedSeq {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0);
    let support = inst.support();
    let answer = support[rng.gen_range(0..support.len())].0.tokens().expect("answers are complete");
    let mut x = MaskedSeq::all_masked(inst.len());
    for _ in 0..rng.gen_range(0..inst.len()) {
        let idx = x.mask_indices();
        let a = idx[rng.gen_range(0..idx.len())];
        x = x.apply_unmask(a, answer[a], inst.vocab()).expect("masked position and valid token");
    }
    x
}

/// All checks for instances `0..cfg.verify.instances` of the evaluation stream.
pub fn run_verify(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<Vec<VerifyRecord>> {
    let family = TaskFamily::new(cfg.family.clone(), cfg.eval_seed);
    let per: Vec<Vec<VerifyRecord>> = (0..cfg.verify.instances as u64)
        .into_par_iter()
        .map(|i| {
            let inst = family.instance(i)?;
            Ok(Ctx { cfg, index: i, inst: &inst, seed: derive_seed(seed, i) }.run())
        })
        .collect::<anyhow::Result<_>>()?;
    let mut out = fixed_point_grid(cfg.train.eps_adv);
    out.extend(per.into_iter().flatten());
    Ok(out)
}
