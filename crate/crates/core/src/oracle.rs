//! Exact ground truth by dynamic programming over the reachable part of the
//! state lattice: terminal distributions, KL divergences, exact policy
//! gradients, the success-rate map `h` and its closed-form policy dynamics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{Denoiser, PosteriorTable, TokenPosterior};
use crate::error::{contract, Error, Result};
use crate::policy::{Gradient, LearnedPolicy, ScorerParams};
use crate::seq::{lattice_size, MaskedSeq, Token, DEFAULT_ENUMERATION_CAP};
use crate::tasks::{reward, RewardKind, TaskInstance};
use crate::unmask::{candidate_table, kernel_row, BlockSchedule, Decoding, UnmaskPolicy};

/// Probabilities of complete sequences, sorted by sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalDistribution {
    atoms: Vec<(MaskedSeq, f64)>,
}

impl TerminalDistribution {
    /// Merges repeated atoms; rejects masked atoms and negative mass.
    pub fn new(atoms: impl IntoIterator<Item = (MaskedSeq, f64)>) -> Result<Self> {
        let mut map: BTreeMap<MaskedSeq, f64> = BTreeMap::new();
        for (x, p) in atoms {
            if !x.is_complete() || !(p >= 0.0) {
                return Err(contract(format!("bad terminal atom {x:?} with mass {p}")));
            }
            *map.entry(x).or_insert(0.0) += p;
        }
        Ok(Self { atoms: map.into_iter().collect() })
    }

    /// The data distribution of `inst`.
    pub fn data(inst: &TaskInstance) -> Self {
        Self { atoms: inst.support().to_vec() }
    }

    pub fn atoms(&self) -> &[(MaskedSeq, f64)] {
        &self.atoms
    }

    pub fn prob(&self, x: &MaskedSeq) -> f64 {
        self.atoms.binary_search_by(|a| a.0.cmp(x)).map_or(0.0, |i| self.atoms[i].1)
    }

    pub fn total(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn expect(&self, mut f: impl FnMut(&MaskedSeq) -> f64) -> f64 {
        self.atoms.iter().map(|(x, p)| p * f(x)).sum()
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        let mut keys: Vec<&MaskedSeq> = self.atoms.iter().chain(&other.atoms).map(|a| &a.0).collect();
        keys.sort();
        keys.dedup();
        0.5 * keys.iter().map(|x| (self.prob(x) - other.prob(x)).abs()).sum::<f64>()
    }
}

fn check_cap(inst: &TaskInstance) -> Result<()> {
    let states = lattice_size(inst.len(), inst.vocab());
    if states > DEFAULT_ENUMERATION_CAP as u128 {
        return Err(Error::CapExceeded { states, cap: DEFAULT_ENUMERATION_CAP });
    }
    Ok(())
}

/// Reachable states with their probabilities, one layer per mask count from `L` down to 0.
pub fn reachable<P, D>(
    inst: &TaskInstance,
    policy: &P,
    den: &D,
    block: Option<&BlockSchedule>,
    decoding: Decoding,
) -> Result<Vec<Vec<(MaskedSeq, f64)>>>
where
    P: UnmaskPolicy + ?Sized,
    D: Denoiser + ?Sized,
{
    check_cap(inst)?;
    let mut layers = vec![vec![(MaskedSeq::all_masked(inst.len()), 1.0)]];
    for _ in 0..inst.len() {
        let mut next: BTreeMap<MaskedSeq, f64> = BTreeMap::new();
        for (x, p) in layers.last().expect("nonempty") {
            let table = candidate_table(den, x, block)?;
            let g = policy.distribution(x, &table)?;
            for (y, q) in kernel_row(&g, &table, x, inst.vocab(), decoding)? {
                *next.entry(y).or_insert(0.0) += p * q;
            }
        }
        layers.push(next.into_iter().collect());
    }
    Ok(layers)
}

/// Exact distribution of generated answers.
pub fn terminal_dist<P, D>(inst: &TaskInstance, policy: &P, den: &D) -> Result<TerminalDistribution>
where
    P: UnmaskPolicy + ?Sized,
    D: Denoiser + ?Sized,
{
    terminal_dist_with(inst, policy, den, None, Decoding::Sample)
}

pub fn terminal_dist_with<P, D>(
    inst: &TaskInstance,
    policy: &P,
    den: &D,
    block: Option<&BlockSchedule>,
    decoding: Decoding,
) -> Result<TerminalDistribution>
where
    P: UnmaskPolicy + ?Sized,
    D: Denoiser + ?Sized,
{
    let layers = reachable(inst, policy, den, block, decoding)?;
    Ok(TerminalDistribution { atoms: layers.into_iter().last().expect("nonempty") })
}

/// `Σ P log(P/Q)`.
pub fn terminal_kl(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64> {
    let mut kl = 0.0;
    for (x, px) in &p.atoms {
        if *px == 0.0 {
            continue;
        }
        let qx = q.prob(x);
        if qx == 0.0 {
            return Err(Error::SupportViolation { atom: x.tokens().expect("terminal atoms are complete"), mass: *px });
        }
        kl += px * libm::log(px / qx);
    }
    Ok(kl.max(0.0))
}

/// `E_{g1}[Σ_n log(g1/g2)]` along trajectories of `g1`.
pub fn trajectory_kl<P1, P2, D>(inst: &TaskInstance, g1: &P1, g2: &P2, den: &D) -> Result<f64>
where
    P1: UnmaskPolicy + ?Sized,
    P2: UnmaskPolicy + ?Sized,
    D: Denoiser + ?Sized,
{
    let layers = reachable(inst, g1, den, None, Decoding::Sample)?;
    let mut kl = 0.0;
    for layer in &layers[..inst.len()] {
        for (x, p) in layer {
            let table = den.table(x)?;
            let d1 = g1.distribution(x, &table)?;
            let d2 = g2.distribution(x, &table)?;
            for &(a, q1) in d1.entries() {
                if q1 <= 0.0 {
                    continue;
                }
                let q2 = d2.prob(a);
                if q2 <= 0.0 {
                    return Err(Error::SupportViolation { atom: x.encode(inst.vocab()), mass: q1 });
                }
                kl += p * q1 * libm::log(q1 / q2);
            }
        }
    }
    Ok(kl)
}

/// `KL(p_data ‖ P)`.
pub fn kl_to_ideal(inst: &TaskInstance, p: &TerminalDistribution) -> Result<f64> {
    terminal_kl(&TerminalDistribution::data(inst), p)
}

fn branches(post: &TokenPosterior, decoding: Decoding) -> Vec<(Token, f64)> {
    match decoding {
        Decoding::Sample => {
            post.probs().iter().enumerate().filter(|e| *e.1 > 0.0).map(|(c, &p)| (c as Token, p)).collect()
        }
        Decoding::Argmax => vec![(post.argmax(), 1.0)],
    }
}

/// Policy probabilities over candidates and `∇ log g` for each candidate.
struct LocalGrad {
    candidates: Vec<usize>,
    probs: Vec<f64>,
    dlog: Vec<Gradient>,
}

fn local_grad(policy: &LearnedPolicy, x: &MaskedSeq, table: &PosteriorTable) -> Result<LocalGrad> {
    let sf = policy.features(x, table)?;
    let probs = sf.probs(&policy.params);
    let ds: Vec<Gradient> = sf
        .features
        .iter()
        .map(|f| {
            let mut g = policy.params.zero_grad();
            policy.params.accumulate_score_grad(&f.0, 1.0, &mut g);
            g
        })
        .collect();
    let mut mean = policy.params.zero_grad();
    for (g, p) in ds.iter().zip(&probs) {
        mean.add_scaled(g, *p);
    }
    let dlog = ds
        .into_iter()
        .map(|mut g| {
            g.add_scaled(&mean, -1.0);
            g
        })
        .collect();
    Ok(LocalGrad { candidates: sf.candidates, probs, dlog })
}

/// `(r(x0) − r̄) / (σ + ε_adv)` under `p`, keyed by answer.
pub fn exact_advantages(
    inst: &TaskInstance,
    p: &TerminalDistribution,
    eps_adv: f64,
) -> Result<BTreeMap<MaskedSeq, f64>> {
    let r: Vec<f64> = p.atoms.iter().map(|(x, _)| reward(inst, x)).collect::<Result<_>>()?;
    let mean: f64 = p.atoms.iter().zip(&r).map(|((_, q), r)| q * r).sum();
    let var: f64 = p.atoms.iter().zip(&r).map(|((_, q), r)| q * (r - mean) * (r - mean)).sum();
    let std = libm::sqrt(var);
    Ok(p.atoms.iter().zip(&r).map(|((x, _), r)| (x.clone(), (r - mean) / (std + eps_adv))).collect())
}

/// `∇ Σ_{x0} p_φ(x0) A(x0)` with `A` frozen at the current policy,
/// by forward differentiation of path probabilities.
pub fn exact_output_grad<D: Denoiser + ?Sized>(
    inst: &TaskInstance,
    policy: &LearnedPolicy,
    den: &D,
    eps_adv: f64,
) -> Result<Gradient> {
    check_cap(inst)?;
    let zero = policy.params.zero_grad();
    let mut layer: BTreeMap<MaskedSeq, (f64, Gradient)> = BTreeMap::new();
    layer.insert(MaskedSeq::all_masked(inst.len()), (1.0, zero.clone()));
    for _ in 0..inst.len() {
        let mut next: BTreeMap<MaskedSeq, (f64, Gradient)> = BTreeMap::new();
        for (x, (p, dp)) in &layer {
            let table = den.table(x)?;
            let lg = local_grad(policy, x, &table)?;
            for (j, &a) in lg.candidates.iter().enumerate() {
                let ga = lg.probs[j];
                if ga <= 0.0 {
                    continue;
                }
                let post = table.get(a).expect("candidate in table");
                for (c, pc) in branches(post, Decoding::Sample) {
                    let e = next.entry(x.apply_unmask(a, c, inst.vocab())?).or_insert_with(|| (0.0, zero.clone()));
                    e.0 += p * ga * pc;
                    e.1.add_scaled(dp, ga * pc);
                    e.1.add_scaled(&lg.dlog[j], p * ga * pc);
                }
            }
        }
        layer = next;
    }
    let terminal = TerminalDistribution { atoms: layer.iter().map(|(x, v)| (x.clone(), v.0)).collect() };
    let adv = exact_advantages(inst, &terminal, eps_adv)?;
    let mut out = zero;
    for (x, (_, dp)) in &layer {
        out.add_scaled(dp, adv[x]);
    }
    Ok(out)
}

/// `E[Σ_n A(x0) ∇ log g_φ(a_n|x_n)]` by backward values over reachable states.
pub fn exact_token_grad<D: Denoiser + ?Sized>(
    inst: &TaskInstance,
    policy: &LearnedPolicy,
    den: &D,
    eps_adv: f64,
) -> Result<Gradient> {
    let layers = reachable(inst, policy, den, None, Decoding::Sample)?;
    let terminal = TerminalDistribution { atoms: layers[inst.len()].clone() };
    let mut value: BTreeMap<MaskedSeq, f64> = exact_advantages(inst, &terminal, eps_adv)?;
    let mut out = policy.params.zero_grad();
    for layer in layers[..inst.len()].iter().rev() {
        let mut here = BTreeMap::new();
        for (x, p) in layer {
            let table = den.table(x)?;
            let lg = local_grad(policy, x, &table)?;
            let mut v = 0.0;
            for (j, &a) in lg.candidates.iter().enumerate() {
                let ga = lg.probs[j];
                if ga <= 0.0 {
                    continue;
                }
                let post = table.get(a).expect("candidate in table");
                let mut q = 0.0;
                for (c, pc) in branches(post, Decoding::Sample) {
                    q += pc * value[&x.apply_unmask(a, c, inst.vocab())?];
                }
                out.add_scaled(&lg.dlog[j], p * ga * q);
                v += ga * q;
            }
            here.insert(x.clone(), v);
        }
        value = here;
    }
    Ok(out)
}

/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞, 1e−8)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(1e-8f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlGradientReport {
    /// `E_old[κ Σ_n ∇ log g_φ(a_n|x_n)]`, exact.
    pub analytic: Gradient,
    /// Central differences of the trajectory KL to the reference.
    pub finite_difference: Gradient,
    pub rel_err: f64,
}

/// Compare the κ-weighted score gradient with finite differences of
/// `trajectory_kl(g_φ, g_ref)`.
pub fn prop3_check<R, D>(
    inst: &TaskInstance,
    policy: &LearnedPolicy,
    old: &ScorerParams,
    reference: &R,
    den: &D,
    fd_step: f64,
) -> Result<KlGradientReport>
where
    R: UnmaskPolicy + ?Sized,
    D: Denoiser + ?Sized,
{
    check_cap(inst)?;
    let old_policy = LearnedPolicy::new(old.clone(), policy.mode, policy.feature_k)?;
    let mut analytic = policy.params.zero_grad();
    struct Frame {
        x: MaskedSeq,
        p_old: f64,
        log_new: f64,
        log_old: f64,
        log_ref: f64,
        score: Gradient,
    }
    let mut stack = vec![Frame {
        x: MaskedSeq::all_masked(inst.len()),
        p_old: 1.0,
        log_new: 0.0,
        log_old: 0.0,
        log_ref: 0.0,
        score: policy.params.zero_grad(),
    }];
    while let Some(f) = stack.pop() {
        if f.x.mask_count() == 0 {
            let kappa = libm::exp(f.log_new - f.log_old) * (1.0 + f.log_new - f.log_ref);
            analytic.add_scaled(&f.score, f.p_old * kappa);
            continue;
        }
        let table = den.table(&f.x)?;
        let lg = local_grad(policy, &f.x, &table)?;
        let g_old = old_policy.distribution(&f.x, &table)?;
        let g_ref = reference.distribution(&f.x, &table)?;
        for (j, &a) in lg.candidates.iter().enumerate() {
            let go = g_old.prob(a);
            if go <= 0.0 {
                continue;
            }
            let gr = g_ref.prob(a);
            if gr <= 0.0 {
                return Err(Error::RealizationMismatch(format!("reference gives zero probability to position {a}")));
            }
            let mut score = f.score.clone();
            score.add_scaled(&lg.dlog[j], 1.0);
            let post = table.get(a).expect("candidate in table");
            for (c, pc) in branches(post, Decoding::Sample) {
                stack.push(Frame {
                    x: f.x.apply_unmask(a, c, inst.vocab())?,
                    p_old: f.p_old * go * pc,
                    log_new: f.log_new + libm::log(lg.probs[j]),
                    log_old: f.log_old + libm::log(go),
                    log_ref: f.log_ref + libm::log(gr),
                    score: score.clone(),
                });
            }
        }
    }
    let mut fd = policy.params.zero_grad();
    for i in 0..policy.params.len() {
        let mut up = policy.clone();
        up.params.values_mut()[i] += fd_step;
        let mut dn = policy.clone();
        dn.params.values_mut()[i] -= fd_step;
        fd.0[i] =
            (trajectory_kl(inst, &up, reference, den)? - trajectory_kl(inst, &dn, reference, den)?) / (2.0 * fd_step);
    }
    let rel_err = max_relative_error(&analytic.0, &fd.0);
    Ok(KlGradientReport { analytic, finite_difference: fd, rel_err })
}

fn check_h_args(r_ref: f64, beta: f64, eps_adv: f64) -> Result<()> {
    if !(r_ref > 0.0 && r_ref < 1.0) {
        return Err(contract(format!("reference success rate {r_ref} must lie in (0, 1)")));
    }
    if !(beta > 0.0) || !(eps_adv >= 0.0) {
        return Err(contract(format!("need beta > 0 and eps_adv >= 0, got {beta}, {eps_adv}")));
    }
    Ok(())
}

/// `1 / (1 + ((1 − r_ref)/r_ref) · exp(−(1/β) / sqrt(r(1 − r) + ε)))`.
pub fn h_map(r: f64, r_ref: f64, beta: f64, eps_adv: f64) -> Result<f64> {
    check_h_args(r_ref, beta, eps_adv)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(contract(format!("success rate {r} outside [0, 1]")));
    }
    let s = libm::sqrt(r * (1.0 - r) + eps_adv);
    Ok(1.0 / (1.0 + (1.0 - r_ref) / r_ref * libm::exp(-(1.0 / beta) / s)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointReport {
    pub r_ref: f64,
    pub beta: f64,
    pub eps_adv: f64,
    /// `r_0 = r_ref, r_k = h(r_{k−1})`.
    pub iterates: Vec<f64>,
    pub r_star: f64,
    /// Central-difference estimate of `|h′(r*)|`.
    pub h_prime: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fixed_point(r_ref: f64, beta: f64, eps_adv: f64, tol: f64, max_iter: usize) -> Result<FixedPointReport> {
    check_h_args(r_ref, beta, eps_adv)?;
    let mut iterates = vec![r_ref];
    let mut converged = false;
    while iterates.len() <= max_iter {
        let prev = *iterates.last().expect("nonempty");
        let next = h_map(prev, r_ref, beta, eps_adv)?;
        iterates.push(next);
        if (next - prev).abs() < tol {
            converged = true;
            break;
        }
    }
    let r_star = *iterates.last().expect("nonempty");
    let d = 1e-6;
    let (lo, hi) = ((r_star - d).max(0.0), (r_star + d).min(1.0));
    let h_prime = ((h_map(hi, r_ref, beta, eps_adv)? - h_map(lo, r_ref, beta, eps_adv)?) / (hi - lo)).abs();
    Ok(FixedPointReport { r_ref, beta, eps_adv, iterations: iterates.len() - 1, iterates, r_star, h_prime, converged })
}

/// Closed-form optimal policies of successive regularized iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsRun {
    /// `p_0 = p_ref, p_1, …`.
    pub dists: Vec<TerminalDistribution>,
    /// Success rates `r_n = Σ p_n r`.
    pub rates: Vec<f64>,
}

/// Iterate `p_n ∝ p_ref · exp((1/β)(w⁺(r_{n−1}) r − w⁻(r_{n−1})(1 − r)))`
/// with `w⁺(r) = (1 − r)/sqrt(r(1 − r) + ε)` and `w⁻(r) = r/sqrt(r(1 − r) + ε)`.
pub fn lemma1_dynamics(
    inst: &TaskInstance,
    p_ref: &TerminalDistribution,
    beta: f64,
    eps_adv: f64,
    iters: usize,
) -> Result<DynamicsRun> {
    if inst.reward_kind() != RewardKind::BinaryExact {
        return Err(Error::InvalidConfig("policy dynamics need a binary reward".into()));
    }
    let r: Vec<f64> = p_ref.atoms.iter().map(|(x, _)| reward(inst, x)).collect::<Result<_>>()?;
    let rate = |p: &[(MaskedSeq, f64)]| p.iter().zip(&r).map(|((_, q), r)| q * r).sum::<f64>();
    let r_ref = rate(&p_ref.atoms);
    check_h_args(r_ref, beta, eps_adv)?;
    let mut run = DynamicsRun { dists: vec![p_ref.clone()], rates: vec![r_ref] };
    for _ in 0..iters {
        let prev = *run.rates.last().expect("nonempty");
        let s = libm::sqrt(prev * (1.0 - prev) + eps_adv);
        let (wp, wm) = ((1.0 - prev) / s, prev / s);
        let logits: Vec<f64> = p_ref
            .atoms
            .iter()
            .zip(&r)
            .map(
                |((_, q), r)| {
                    if *q > 0.0 {
                        libm::log(*q) + (wp * r - wm * (1.0 - r)) / beta
                    } else {
                        f64::NEG_INFINITY
                    }
                },
            )
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = top + libm::log(logits.iter().map(|l| libm::exp(l - top)).sum::<f64>());
        let atoms: Vec<(MaskedSeq, f64)> =
            p_ref.atoms.iter().zip(&logits).map(|((x, _), l)| (x.clone(), libm::exp(l - log_z))).collect();
        run.rates.push(rate(&atoms));
        run.dists.push(TerminalDistribution { atoms });
    }
    Ok(run)
}
