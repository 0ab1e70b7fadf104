//! Learnable scorer and the softmax unmasking policy built on it.
//!
//! Every candidate position is featurized independently from its token
//! posterior, scored by a perceptron `d_f -> h -> h -> 1` with `tanh`
//! activations, and the scores are passed through a softmax over the
//! candidates. In Top-K-restricted mode the candidates are the `K` most
//! confident positions, so the restriction depends only on the denoiser.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, PosteriorTable, TokenPosterior};
use crate::error::{contract, Error, Result};
use crate::seq::MaskedSeq;
use crate::unmask::{top_k_set, IndexDistribution, UnmaskPolicy};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_FEATURE_K: usize = 5;

/// Which positions the softmax ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyMode {
    FullSoftmax,
    TopkRestricted { k: usize },
}

impl PolicyMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyMode::TopkRestricted { k: 0 } => Err(Error::InvalidConfig("topk-restricted needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Candidate positions of `table`, ascending.
    pub fn candidates(&self, table: &PosteriorTable) -> Vec<usize> {
        match *self {
            PolicyMode::FullSoftmax => table.indices(),
            PolicyMode::TopkRestricted { k } => top_k_set(table, k),
        }
    }
}

/// `[a/L, n/L, top-K probabilities descending, entropy, margin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(k: usize) -> usize {
        k + 4
    }
}

/// Features of masked position `a` of `x` with posterior `post`.
pub fn featurize(x: &MaskedSeq, a: usize, post: &TokenPosterior, k: usize) -> FeatureVector {
    let len = x.len() as f64;
    let mut f = Vec::with_capacity(k + 4);
    f.push(a as f64 / len);
    f.push(x.mask_count() as f64 / len);
    let sorted = post.sorted_desc();
    f.extend((0..k).map(|i| sorted.get(i).copied().unwrap_or(0.0)));
    f.push(post.entropy());
    f.push(post.margin());
    FeatureVector(f)
}

/// Features at `a` with the posterior drawn from `den`.
pub fn featurize_at<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq, a: usize, k: usize) -> Result<FeatureVector> {
    if a >= x.len() || !x.is_masked(a) {
        return Err(contract(alloc::format!("position {a} is not masked")));
    }
    Ok(featurize(x, a, &den.posterior(x, a)?, k))
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Every weight and bias uniform in `±1/sqrt(fan_in)`.
    #[default]
    Uniform,
    /// Uniform hidden layers, zero output layer: all scores start equal.
    ZeroOutput,
    /// All zeros.
    Zeros,
}

/// Flat weights of the scorer.
///
/// Layout: `W1 (h×d, row-major), b1 (h), W2 (h×h), b2 (h), w3 (h), b3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    input_dim: usize,
    hidden: usize,
    values: Vec<f64>,
}

/// A gradient with the same layout as [`ScorerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

fn param_count(d: usize, h: usize) -> usize {
    h * d + h + h * h + h + h + 1
}

impl ScorerParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self { input_dim, hidden, values: vec![0.0; param_count(input_dim, hidden)] }
    }

    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, init: Init, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        if init == Init::Zeros {
            return p;
        }
        let (d, h) = (input_dim, hidden);
        let bounds = [(h * d + h, d), (h * h + h, h), (h + 1, h)];
        let mut at = 0;
        for (layer, (count, fan_in)) in bounds.into_iter().enumerate() {
            let b = 1.0 / libm::sqrt(fan_in as f64);
            for v in &mut p.values[at..at + count] {
                let u: f64 = rng.gen();
                *v = if layer == 2 && init == Init::ZeroOutput { 0.0 } else { (2.0 * u - 1.0) * b };
            }
            at += count;
        }
        p
    }

    /// Rebuild from a flat vector; the length must match the shape.
    pub fn from_values(input_dim: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != param_count(input_dim, hidden) {
            return Err(contract(alloc::format!(
                "{} values for a {input_dim}->{hidden}->{hidden}->1 scorer",
                values.len()
            )));
        }
        Ok(Self { input_dim, hidden, values })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Number of parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zero_grad(&self) -> Gradient {
        Gradient::zeros(self.len())
    }

    #[allow(clippy::type_complexity)]
    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64], &[f64], f64) {
        let (d, h) = (self.input_dim, self.hidden);
        let (w1, rest) = self.values.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h * h);
        let (b2, rest) = rest.split_at(h);
        let (w3, rest) = rest.split_at(h);
        (w1, b1, w2, b2, w3, rest[0])
    }

    fn hidden_activations(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h) = (self.input_dim, self.hidden);
        let (w1, b1, w2, b2, _, _) = self.split();
        let a1: Vec<f64> = (0..h)
            .map(|i| libm::tanh(b1[i] + w1[i * d..(i + 1) * d].iter().zip(f).map(|(w, x)| w * x).sum::<f64>()))
            .collect();
        let a2: Vec<f64> = (0..h)
            .map(|j| libm::tanh(b2[j] + w2[j * h..(j + 1) * h].iter().zip(&a1).map(|(w, x)| w * x).sum::<f64>()))
            .collect();
        (a1, a2)
    }

    pub fn score(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.input_dim);
        let (_, a2) = self.hidden_activations(f);
        let (_, _, _, _, w3, b3) = self.split();
        b3 + w3.iter().zip(&a2).map(|(w, x)| w * x).sum::<f64>()
    }

    /// Add `scale · ∂score/∂θ` at input `f` into `grad`.
    pub fn accumulate_score_grad(&self, f: &[f64], scale: f64, grad: &mut Gradient) {
        if scale == 0.0 {
            return;
        }
        let (d, h) = (self.input_dim, self.hidden);
        let (a1, a2) = self.hidden_activations(f);
        let (_, _, w2, _, w3, _) = self.split();
        let g = &mut grad.0;
        let o_w1 = 0;
        let o_b1 = h * d;
        let o_w2 = o_b1 + h;
        let o_b2 = o_w2 + h * h;
        let o_w3 = o_b2 + h;
        let o_b3 = o_w3 + h;
        g[o_b3] += scale;
        let mut d2 = vec![0.0; h];
        for j in 0..h {
            g[o_w3 + j] += scale * a2[j];
            d2[j] = scale * w3[j] * (1.0 - a2[j] * a2[j]);
        }
        let mut d1 = vec![0.0; h];
        for j in 0..h {
            g[o_b2 + j] += d2[j];
            for i in 0..h {
                g[o_w2 + j * h + i] += d2[j] * a1[i];
                d1[i] += w2[j * h + i] * d2[j];
            }
        }
        for i in 0..h {
            let di = d1[i] * (1.0 - a1[i] * a1[i]);
            g[o_b1 + i] += di;
            for k in 0..d {
                g[o_w1 + i * d + k] += di * f[k];
            }
        }
    }
}

/// Candidate positions and their features at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFeatures {
    /// Every position of the posterior table, ascending.
    pub positions: Vec<usize>,
    /// Candidate positions, ascending.
    pub candidates: Vec<usize>,
    pub features: Vec<FeatureVector>,
}

impl StepFeatures {
    pub fn new(x: &MaskedSeq, table: &PosteriorTable, mode: PolicyMode, feature_k: usize) -> Result<Self> {
        if table.is_empty() {
            return Err(contract("no masked positions"));
        }
        let candidates = mode.candidates(table);
        let features = candidates
            .iter()
            .map(|&a| featurize(x, a, table.get(a).expect("candidates come from the table"), feature_k))
            .collect();
        Ok(Self { positions: table.indices(), candidates, features })
    }

    /// Index of `position` among the candidates.
    pub fn slot(&self, position: usize) -> Option<usize> {
        self.candidates.binary_search(&position).ok()
    }

    /// Softmax probabilities over the candidates.
    pub fn probs(&self, params: &ScorerParams) -> Vec<f64> {
        let s: Vec<f64> = self.features.iter().map(|f| params.score(&f.0)).collect();
        let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| libm::exp(v - top)).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Log-probabilities over the candidates.
    pub fn log_probs(&self, params: &ScorerParams) -> Vec<f64> {
        let s: Vec<f64> = self.features.iter().map(|f| params.score(&f.0)).collect();
        let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + libm::log(s.iter().map(|v| libm::exp(v - top)).sum::<f64>());
        s.into_iter().map(|v| v - lse).collect()
    }

    pub fn distribution(&self, params: &ScorerParams) -> IndexDistribution {
        let p = self.probs(params);
        let w: Vec<f64> = self.positions.iter().map(|i| self.slot(*i).map_or(0.0, |j| p[j])).collect();
        IndexDistribution::from_weights(&self.positions, &w)
    }

    /// Add `scale · ∇ log g(candidate j)` into `grad`.
    pub fn accumulate_grad_log(&self, params: &ScorerParams, j: usize, scale: f64, grad: &mut Gradient) {
        let p = self.probs(params);
        for (b, f) in self.features.iter().enumerate() {
            let delta = if b == j { 1.0 } else { 0.0 };
            params.accumulate_score_grad(&f.0, scale * (delta - p[b]), grad);
        }
    }
}

/// A scorer with its mode, usable as an [`UnmaskPolicy`].
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPolicy {
    pub params: ScorerParams,
    pub mode: PolicyMode,
    pub feature_k: usize,
}

impl LearnedPolicy {
    pub fn new(params: ScorerParams, mode: PolicyMode, feature_k: usize) -> Result<Self> {
        mode.validate()?;
        if params.input_dim() != FeatureVector::dim(feature_k) {
            return Err(contract(alloc::format!(
                "scorer input {} does not match feature dimension {}",
                params.input_dim(),
                FeatureVector::dim(feature_k)
            )));
        }
        Ok(Self { params, mode, feature_k })
    }

    pub fn features(&self, x: &MaskedSeq, table: &PosteriorTable) -> Result<StepFeatures> {
        StepFeatures::new(x, table, self.mode, self.feature_k)
    }

    /// Gradient of `log g(a | x)` for a candidate `a`.
    pub fn grad_log(&self, x: &MaskedSeq, table: &PosteriorTable, a: usize) -> Result<Gradient> {
        let sf = self.features(x, table)?;
        let j = sf.slot(a).ok_or_else(|| contract(alloc::format!("position {a} outside the policy support")))?;
        let mut g = self.params.zero_grad();
        sf.accumulate_grad_log(&self.params, j, 1.0, &mut g);
        Ok(g)
    }
}

impl UnmaskPolicy for LearnedPolicy {
    fn distribution(&self, x: &MaskedSeq, table: &PosteriorTable) -> Result<IndexDistribution> {
        Ok(self.features(x, table)?.distribution(&self.params))
    }
}

/// Policy of `params` at `x` over all masked positions.
pub fn policy_dist<D: Denoiser + ?Sized>(
    params: &ScorerParams,
    mode: PolicyMode,
    feature_k: usize,
    den: &D,
    x: &MaskedSeq,
) -> Result<IndexDistribution> {
    LearnedPolicy::new(params.clone(), mode, feature_k)?.distribution(x, &den.table(x)?)
}

/// Gradient of `log g_φ(a | x)` with respect to every parameter.
pub fn grad_log_policy<D: Denoiser + ?Sized>(
    params: &ScorerParams,
    mode: PolicyMode,
    feature_k: usize,
    den: &D,
    x: &MaskedSeq,
    a: usize,
) -> Result<Gradient> {
    LearnedPolicy::new(params.clone(), mode, feature_k)?.grad_log(x, &den.table(x)?, a)
}

fn check_grad(params: &ScorerParams, grad: &Gradient) -> Result<()> {
    if grad.0.len() != params.len() {
        return Err(contract(alloc::format!("gradient has {} entries, params {}", grad.0.len(), params.len())));
    }
    if let Some((i, v)) = grad.0.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("gradient entry {i} is {v}")));
    }
    Ok(())
}

/// `params + lr · grad`.
pub fn apply_update(params: &ScorerParams, grad: &Gradient, lr: f64) -> Result<ScorerParams> {
    check_grad(params, grad)?;
    let mut out = params.clone();
    for (p, g) in out.values.iter_mut().zip(&grad.0) {
        *p += lr * g;
    }
    Ok(out)
}

/// Gradient ascent with heavy-ball momentum; `momentum = 0` is plain ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct Ascent {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Ascent {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ScorerParams, grad: &Gradient) -> Result<()> {
        check_grad(params, grad)?;
        if self.momentum == 0.0 {
            *params = apply_update(params, grad, self.lr)?;
            return Ok(());
        }
        if self.velocity.len() != grad.0.len() {
            self.velocity = vec![0.0; grad.0.len()];
        }
        for ((p, v), g) in params.values.iter_mut().zip(&mut self.velocity).zip(&grad.0) {
            *v = self.momentum * *v + g;
            *p += self.lr * *v;
        }
        Ok(())
    }
}
