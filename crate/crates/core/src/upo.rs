//! Unmasking policy optimization: groups, advantages, the clipped objective
//! with its divergence realizations, and the two-phase training loop.
//!
//! Every objective here is maximized by gradient ascent. For a mini-batch `B`
//! of steps drawn from a group of `G` trajectories the objective is
//!
//! ```text
//! J_B = (1/|B|) Σ_{(g,n)∈B} min(ρ A_g, clip(ρ, 1±ε) A_g)  −  (β/G) Σ_{(g,n)∈B} d_{g,n}
//! ```
//!
//! with `d_{g,n} = κ_g log g_φ(a_n|x_n)` for the KL realizations and
//! `d_{g,n} = −log g_φ(a*_n|x_n)` for cross-entropy toward `g_conf`. With a
//! single batch covering the group this is the per-trajectory step mean of
//! the clipped terms averaged over the group, minus `β` times the mean
//! per-trajectory divergence.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{CachedDenoiser, Denoiser, DenoiserSpec, TaskDenoiser};
use crate::error::{contract, Error, Result};
use crate::policy::{
    Ascent, FeatureVector, Gradient, Init, LearnedPolicy, PolicyMode, ScorerParams, StepFeatures, DEFAULT_FEATURE_K,
    DEFAULT_HIDDEN,
};
use crate::seq::MaskedSeq;
use crate::tasks::{TaskFamily, TaskInstance};
use crate::unmask::{confidence_order, rollout, Decoding, Heuristic, Trajectory};

/// States memoized per training prompt.
const PROMPT_CACHE: usize = 1 << 16;

/// Divergence regularizer and its reference scheduler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Realization {
    /// Cross-entropy toward `g_conf`; full-softmax mode only.
    MaxConfCe,
    /// Trajectory KL toward `g_conf^τ`.
    SoftmaxKl { tau: f64 },
    /// Trajectory KL toward `g_TopK`; Top-K-restricted mode with the same `k`.
    TopkKl { k: usize },
}

impl Realization {
    pub fn default_mode(&self) -> PolicyMode {
        match *self {
            Realization::TopkKl { k } => PolicyMode::TopkRestricted { k },
            _ => PolicyMode::FullSoftmax,
        }
    }

    pub fn check_mode(&self, mode: PolicyMode) -> Result<()> {
        let ok = match (*self, mode) {
            (Realization::MaxConfCe | Realization::SoftmaxKl { .. }, PolicyMode::FullSoftmax) => true,
            (Realization::TopkKl { k }, PolicyMode::TopkRestricted { k: j }) => k == j,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::RealizationMismatch(format!("{self:?} cannot run in {mode:?}")))
        }
    }

    /// The reference scheduler, or `None` for cross-entropy.
    pub fn reference(&self) -> Option<Heuristic> {
        match *self {
            Realization::MaxConfCe => None,
            Realization::SoftmaxKl { tau } => Some(Heuristic::Softmax { tau }),
            Realization::TopkKl { k } => Some(Heuristic::TopK { k }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub eps_clip: f64,
    pub eps_adv: f64,
    pub group_size: usize,
    pub inner_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub realization: Realization,
    /// Defaults to the realization's natural mode.
    pub mode: Option<PolicyMode>,
    pub iterations: usize,
    /// Steps per mini-batch; `None` uses the whole group.
    pub batch_size: Option<usize>,
    pub hidden: usize,
    pub feature_k: usize,
    pub init: Init,
    pub decoding: Decoding,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_prompts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            eps_clip: 0.2,
            eps_adv: 1e-4,
            group_size: 8,
            inner_epochs: 2,
            lr: 1e-2,
            momentum: 0.0,
            realization: Realization::TopkKl { k: 5 },
            mode: None,
            iterations: 200,
            batch_size: None,
            hidden: DEFAULT_HIDDEN,
            feature_k: DEFAULT_FEATURE_K,
            init: Init::ZeroOutput,
            decoding: Decoding::Sample,
            pretrain_steps: 200,
            pretrain_lr: 0.5,
            pretrain_prompts: 32,
        }
    }
}

impl TrainConfig {
    pub fn policy_mode(&self) -> PolicyMode {
        self.mode.unwrap_or_else(|| self.realization.default_mode())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be finite and >= 0");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("eps_clip must lie in (0, 1)");
        }
        if !(self.eps_adv >= 0.0) {
            return bad("eps_adv must be >= 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.inner_epochs < 1 {
            return bad("inner_epochs must be >= 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1");
        }
        if !self.lr.is_finite() || !self.pretrain_lr.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rates must be finite and momentum in [0, 1)");
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1");
        }
        match self.realization {
            Realization::SoftmaxKl { tau } if !(tau > 0.0) => return bad("softmax-kl tau must be positive"),
            Realization::TopkKl { k: 0 } => return bad("topk-kl k must be >= 1"),
            _ => {}
        }
        self.policy_mode().validate()?;
        self.realization.check_mode(self.policy_mode())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ScorerParams {
        ScorerParams::init(FeatureVector::dim(self.feature_k), self.hidden, self.init, rng)
    }
}

/// `(r − mean) / (popstd + ε_adv)`.
pub fn compute_advantages(rewards: &[f64], eps_adv: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(contract("a group needs at least two rewards"));
    }
    let (mean, std) = mean_std(rewards);
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps_adv)).collect())
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Clipped surrogate value and its derivative with respect to `logp_new`.
pub fn clipped_term(logp_new: f64, logp_old: f64, advantage: f64, eps_clip: f64) -> (f64, f64) {
    let ratio = libm::exp(logp_new - logp_old);
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// `−log g_φ(a*|x)` toward the most confident position, with its gradient.
pub fn divergence_ce<D: Denoiser + ?Sized>(
    params: &ScorerParams,
    mode: PolicyMode,
    feature_k: usize,
    den: &D,
    x: &MaskedSeq,
) -> Result<(f64, Gradient)> {
    Realization::MaxConfCe.check_mode(mode)?;
    let table = den.table(x)?;
    let policy = LearnedPolicy::new(params.clone(), mode, feature_k)?;
    let sf = policy.features(x, &table)?;
    let j = sf.slot(confidence_order(&table)[0]).expect("full mode covers every position");
    let mut g = params.zero_grad();
    sf.accumulate_grad_log(params, j, -1.0, &mut g);
    Ok((-sf.log_probs(params)[j], g))
}

/// One step of a sampled trajectory with everything the objective needs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub features: StepFeatures,
    /// Candidate slot of the taken action.
    pub slot: usize,
    pub log_old: f64,
    /// `log g_ref(a_n|x_n)` for the KL realizations.
    pub log_ref: Option<f64>,
    /// Candidate slot of the most confident position, for cross-entropy.
    pub ce_slot: Option<usize>,
    /// `log g_old(a*_n|x_n)` for cross-entropy.
    pub ce_log_old: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajRecord {
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    pub sum_log_old: f64,
    pub sum_log_ref: f64,
}

impl TrajRecord {
    /// `Σ_n log g_φ(a_n|x_n)`.
    pub fn sum_log(&self, params: &ScorerParams) -> f64 {
        self.steps.iter().map(|s| s.features.log_probs(params)[s.slot]).sum()
    }
}

/// `G` trajectories for one prompt sampled under the frozen old policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub prompt_id: u64,
    pub mode: PolicyMode,
    pub realization: Realization,
    pub trajectories: Vec<TrajRecord>,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl Group {
    /// Cache per-step features and log-probabilities of `trajs` under `old`.
    pub fn build(trajs: &[Trajectory], old: &LearnedPolicy, realization: Realization, eps_adv: f64) -> Result<Self> {
        realization.check_mode(old.mode)?;
        let reference = realization.reference();
        let mut records = Vec::with_capacity(trajs.len());
        for t in trajs {
            let mut steps = Vec::with_capacity(t.steps());
            for n in 0..t.steps() {
                let (x, table, a) = (&t.states[n], &t.tables[n], t.actions[n]);
                let features = old.features(x, table)?;
                let slot =
                    features.slot(a).ok_or_else(|| contract(format!("action {a} outside the old policy support")))?;
                let old_lp = features.log_probs(&old.params);
                let log_old = old_lp[slot];
                let log_ref = match reference {
                    Some(h) => {
                        let q = h.from_table(table)?.prob(a);
                        if q <= 0.0 {
                            return Err(Error::RealizationMismatch(format!(
                                "reference {h} gives zero probability to action {a}"
                            )));
                        }
                        Some(libm::log(q))
                    }
                    None => None,
                };
                let ce_slot = match reference {
                    None => features.slot(confidence_order(table)[0]),
                    Some(_) => None,
                };
                let ce_log_old = ce_slot.map(|j| old_lp[j]);
                steps.push(StepRecord { features, slot, log_old, log_ref, ce_slot, ce_log_old });
            }
            let sum_log_old = steps.iter().map(|s| s.log_old).sum();
            let sum_log_ref = steps.iter().map(|s| s.log_ref.unwrap_or(0.0)).sum();
            records.push(TrajRecord { steps, reward: t.reward, sum_log_old, sum_log_ref });
        }
        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let advantages = compute_advantages(&rewards, eps_adv)?;
        let (mean, std) = mean_std(&rewards);
        let prompt_id = trajs.first().map_or(0, |t| t.prompt_id);
        Ok(Self { prompt_id, mode: old.mode, realization, trajectories: records, rewards, mean, std, advantages })
    }

    /// `(trajectory, step)` pairs in flattening order.
    pub fn step_index(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (g, t) in self.trajectories.iter().enumerate() {
            out.extend((0..t.steps.len()).map(|n| (g, n)));
        }
        out
    }

    /// Sample estimate of the divergence at the old policy.
    pub fn divergence_estimate(&self) -> f64 {
        let per: Vec<f64> = self
            .trajectories
            .iter()
            .map(|t| match self.realization {
                Realization::MaxConfCe => t.steps.iter().map(|s| -s.ce_log_old.unwrap_or(f64::NAN)).sum(),
                _ => t.sum_log_old - t.sum_log_ref,
            })
            .collect();
        per.iter().sum::<f64>() / per.len() as f64
    }
}

/// `κ = exp(Σ log g_φ − Σ log g_old) · (1 + Σ log g_φ − Σ log g_ref)`.
pub fn kappa(traj: &TrajRecord, params: &ScorerParams) -> Result<f64> {
    if traj.steps.iter().any(|s| s.log_ref.is_none()) {
        return Err(Error::RealizationMismatch("kappa needs reference log-probabilities".into()));
    }
    let s = traj.sum_log(params);
    Ok(libm::exp(s - traj.sum_log_old) * (1.0 + s - traj.sum_log_ref))
}

/// Per-trajectory κ, or zeros for cross-entropy.
pub fn kappas(group: &Group, params: &ScorerParams) -> Result<Vec<f64>> {
    match group.realization {
        Realization::MaxConfCe => Ok(alloc::vec![0.0; group.trajectories.len()]),
        _ => group.trajectories.iter().map(|t| kappa(t, params)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    /// `J_B`; ascent increases it.
    pub value: f64,
    pub reward_term: f64,
    /// `Σ_B d_{g,n} / G`, before the `β` factor.
    pub divergence_term: f64,
    pub grad: Gradient,
}

/// `J_B` and its gradient over `steps`, with `κ` held fixed.
pub fn minibatch_objective(
    group: &Group,
    steps: &[(usize, usize)],
    params: &ScorerParams,
    kappas: &[f64],
    cfg: &TrainConfig,
) -> Result<Objective> {
    cfg.realization.check_mode(group.mode)?;
    if group.realization != cfg.realization {
        return Err(Error::RealizationMismatch(format!(
            "group built for {:?}, config asks for {:?}",
            group.realization, cfg.realization
        )));
    }
    if steps.is_empty() {
        return Err(contract("empty mini-batch"));
    }
    let nb = steps.len() as f64;
    let ng = group.trajectories.len() as f64;
    let kl = group.realization != Realization::MaxConfCe;
    let mut grad = params.zero_grad();
    let (mut reward_term, mut div) = (0.0, 0.0);
    for &(g, n) in steps {
        let s = &group.trajectories[g].steps[n];
        let lp = s.features.log_probs(params);
        let (v, w) = clipped_term(lp[s.slot], s.log_old, group.advantages[g], cfg.eps_clip);
        reward_term += v / nb;
        s.features.accumulate_grad_log(params, s.slot, w / nb, &mut grad);
        if kl {
            div += kappas[g] * lp[s.slot] / ng;
            s.features.accumulate_grad_log(params, s.slot, -cfg.beta * kappas[g] / ng, &mut grad);
        } else {
            let j = s.ce_slot.ok_or_else(|| Error::RealizationMismatch("step lacks a cross-entropy target".into()))?;
            div += -lp[j] / ng;
            s.features.accumulate_grad_log(params, j, cfg.beta / ng, &mut grad);
        }
    }
    Ok(Objective { value: reward_term - cfg.beta * div, reward_term, divergence_term: div, grad })
}

/// The objective over the whole group with `κ` evaluated at `params`.
pub fn upo_loss_and_grad(group: &Group, params: &ScorerParams, cfg: &TrainConfig) -> Result<Objective> {
    let k = kappas(group, params)?;
    minibatch_objective(group, &group.step_index(), params, &k, cfg)
}

/// Per-iteration training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    /// Mean mini-batch objective over the iteration's updates.
    pub loss: f64,
    pub divergence: f64,
}

fn prompt_denoiser(inst: &TaskInstance, spec: DenoiserSpec) -> Result<CachedDenoiser<TaskDenoiser<'_>>> {
    Ok(CachedDenoiser::new(TaskDenoiser::new(inst, spec)?, PROMPT_CACHE))
}

/// Cross-entropy pretraining toward `g_conf`.
///
/// Collects the states visited by one `g_conf` rollout on each of the first
/// `cfg.pretrain_prompts` prompts, then runs `cfg.pretrain_steps` full-batch
/// ascent steps on the mean of `log g_φ(a*|x)`. Returns the parameters and
/// the mean cross-entropy before each step and after the last.
pub fn pretrain_ce<R: Rng + ?Sized>(
    params: &ScorerParams,
    family: &TaskFamily,
    spec: DenoiserSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ScorerParams, Vec<f64>)> {
    let mode = cfg.policy_mode();
    Realization::MaxConfCe.check_mode(mode)?;
    let mut data: Vec<(StepFeatures, usize)> = Vec::new();
    if cfg.pretrain_steps > 0 {
        for i in 0..cfg.pretrain_prompts {
            let inst = family.instance(i as u64)?;
            let den = prompt_denoiser(&inst, spec)?;
            let t = rollout(&inst, &Heuristic::Confidence, &den, None, cfg.decoding, rng)?;
            for n in 0..t.steps() {
                let sf = StepFeatures::new(&t.states[n], &t.tables[n], mode, cfg.feature_k)?;
                let j = sf.slot(t.actions[n]).expect("full mode covers every position");
                data.push((sf, j));
            }
        }
    }
    let mut p = params.clone();
    let mut log = Vec::new();
    if data.is_empty() {
        return Ok((p, log));
    }
    let nd = data.len() as f64;
    let ce = |p: &ScorerParams| data.iter().map(|(sf, j)| -sf.log_probs(p)[*j]).sum::<f64>() / nd;
    let mut opt = Ascent::new(cfg.pretrain_lr, 0.0);
    for _ in 0..cfg.pretrain_steps {
        log.push(ce(&p));
        let mut g = p.zero_grad();
        for (sf, j) in &data {
            sf.accumulate_grad_log(&p, *j, 1.0 / nd, &mut g);
        }
        opt.step(&mut p, &g)?;
    }
    log.push(ce(&p));
    Ok((p, log))
}

/// Initialize, pretrain when the realization asks for it, and train.
pub fn train<R: Rng + ?Sized>(
    family: &TaskFamily,
    spec: DenoiserSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ScorerParams, Vec<HistoryRecord>)> {
    cfg.validate()?;
    let mut params = cfg.init_params(rng);
    if cfg.realization == Realization::MaxConfCe {
        params = pretrain_ce(&params, family, spec, cfg, rng)?.0;
    }
    let mut history = Vec::with_capacity(cfg.iterations);
    params = train_from(params, family, spec, cfg, rng, |h, _| history.push(h.clone()))?;
    Ok((params, history))
}

/// The outer loop from given parameters; `on_iter` sees each record.
///
/// Iteration `i` trains on prompt `i` of `family`.
pub fn train_from<R: Rng + ?Sized>(
    mut params: ScorerParams,
    family: &TaskFamily,
    spec: DenoiserSpec,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_iter: impl FnMut(&HistoryRecord, &ScorerParams),
) -> Result<ScorerParams> {
    cfg.validate()?;
    let mode = cfg.policy_mode();
    let mut opt = Ascent::new(cfg.lr, cfg.momentum);
    for iter in 0..cfg.iterations {
        let inst = family.instance(iter as u64)?;
        let den = prompt_denoiser(&inst, spec)?;
        let old = LearnedPolicy::new(params.clone(), mode, cfg.feature_k)?;
        let trajs = (0..cfg.group_size)
            .map(|_| rollout(&inst, &old, &den, None, cfg.decoding, rng))
            .collect::<Result<Vec<_>>>()?;
        let group = Group::build(&trajs, &old, cfg.realization, cfg.eps_adv)?;
        let index = group.step_index();
        let batch = cfg.batch_size.unwrap_or(index.len()).max(1);
        let (mut total, mut updates) = (0.0, 0usize);
        for _ in 0..cfg.inner_epochs {
            let k = kappas(&group, &params)?;
            for chunk in index.chunks(batch) {
                let obj = minibatch_objective(&group, chunk, &params, &k, cfg)?;
                if !obj.value.is_finite() || !obj.grad.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "iteration {iter}: objective {} on group prompt {} rewards {:?} kappas {:?}",
                        obj.value, group.prompt_id, group.rewards, k
                    )));
                }
                opt.step(&mut params, &obj.grad)?;
                total += obj.value;
                updates += 1;
            }
        }
        let rec = HistoryRecord {
            iter,
            mean_reward: group.mean,
            reward_std: group.std,
            loss: total / updates as f64,
            divergence: group.divergence_estimate(),
        };
        on_iter(&rec, &params);
    }
    Ok(params)
}
