//! Frozen token posteriors: the exact conditional marginal of the data
//! distribution and two deterministic corruptions of it.
//!
//! `tempered` raises the exact posterior to the power `gamma` and
//! renormalizes. `windowed` conditions only on unmasked entries within
//! distance `window` of the queried position and keeps only clues whose
//! footprint lies inside that window. When a windowed or tempered view has
//! no consistent completion it falls back to the uniform posterior.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::seq::{MaskedSeq, Token, Vocab};
use crate::tasks::{odometer, TaskInstance, Universe};

/// Categorical distribution over the `m` tokens at one masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPosterior {
    probs: Vec<f64>,
}

impl TokenPosterior {
    /// Validates non-negativity and normalization within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.len() < 2 || probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(contract(alloc::format!("not a token posterior: {probs:?}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab: Vocab) -> Self {
        let m = vocab.size();
        Self { probs: vec![1.0 / m as f64; m] }
    }

    fn from_weights(weights: Vec<f64>) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        Some(Self { probs: weights.into_iter().map(|w| w / total).collect() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token as usize]
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Probabilities sorted in descending order.
    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut p = self.probs.clone();
        p.sort_by(|a, b| b.total_cmp(a));
        p
    }

    /// `top1 - top2`.
    pub fn margin(&self) -> f64 {
        let s = self.sorted_desc();
        s[0] - s[1]
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * libm::log(p)).sum::<f64>()
    }

    /// Lowest token with maximal probability.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (t, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = t;
            }
        }
        best as Token
    }
}

/// Posteriors for a set of masked positions, ascending by position.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PosteriorTable {
    entries: Vec<(usize, TokenPosterior)>,
}

impl PosteriorTable {
    pub fn new(mut entries: Vec<(usize, TokenPosterior)>) -> Self {
        entries.sort_by_key(|e| e.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, TokenPosterior)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn get(&self, index: usize) -> Option<&TokenPosterior> {
        self.entries.binary_search_by_key(&index, |e| e.0).ok().map(|i| &self.entries[i].1)
    }

    /// Sub-table over the positions for which `keep` is true.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self { entries: self.entries.iter().filter(|e| keep(e.0)).cloned().collect() }
    }
}

/// Which posterior a [`TaskDenoiser`] serves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DenoiserSpec {
    Exact,
    Tempered { gamma: f64 },
    Windowed { window: usize },
}

impl DenoiserSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DenoiserSpec::Exact => "exact",
            DenoiserSpec::Tempered { .. } => "tempered",
            DenoiserSpec::Windowed { .. } => "windowed",
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        match *self {
            DenoiserSpec::Tempered { gamma } if !(gamma > 0.0 && gamma <= 1.0) => {
                Err(Error::InvalidConfig(alloc::format!("gamma {gamma} outside (0, 1]")))
            }
            DenoiserSpec::Windowed { window } if window > len => {
                Err(Error::InvalidConfig(alloc::format!("window {window} exceeds length {len}")))
            }
            _ => Ok(()),
        }
    }
}

/// Source of token posteriors for masked positions of a state.
#[allow(clippy::len_without_is_empty)]
pub trait Denoiser {
    fn vocab(&self) -> Vocab;
    fn len(&self) -> usize;
    fn posterior(&self, x: &MaskedSeq, a: usize) -> Result<TokenPosterior>;

    /// One posterior per masked position.
    fn table(&self, x: &MaskedSeq) -> Result<PosteriorTable> {
        let mut entries = Vec::with_capacity(x.mask_count());
        for a in x.mask_indices().iter().copied() {
            entries.push((a, self.posterior(x, a)?));
        }
        Ok(PosteriorTable { entries })
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn len(&self) -> usize {
        (**self).len()
    }
    fn posterior(&self, x: &MaskedSeq, a: usize) -> Result<TokenPosterior> {
        (**self).posterior(x, a)
    }
    fn table(&self, x: &MaskedSeq) -> Result<PosteriorTable> {
        (**self).table(x)
    }
}

/// Posterior table of `den` at `x`.
pub fn full_posterior_table<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq) -> Result<PosteriorTable> {
    if x.mask_count() == 0 {
        return Err(contract("state has no masks"));
    }
    den.table(x)
}

fn check_query(inst: &TaskInstance, x: &MaskedSeq, a: usize) -> Result<()> {
    if x.len() != inst.len() {
        return Err(contract(alloc::format!("state length {} != {}", x.len(), inst.len())));
    }
    if a >= x.len() || !x.is_masked(a) {
        return Err(contract(alloc::format!("position {a} is not masked")));
    }
    Ok(())
}

fn consistent(answer: &MaskedSeq, x: &MaskedSeq) -> bool {
    answer.cells().iter().zip(x.cells()).all(|(a, c)| c.is_none() || a == c)
}

/// Conditional marginal of the data distribution at `a` given the unmasked entries of `x`.
pub fn exact_posterior(inst: &TaskInstance, x: &MaskedSeq, a: usize) -> Result<TokenPosterior> {
    check_query(inst, x, a)?;
    let mut w = vec![0.0; inst.vocab().size()];
    for (ans, p) in inst.support() {
        if consistent(ans, x) {
            w[ans.get(a).unwrap_or(0) as usize] += p;
        }
    }
    TokenPosterior::from_weights(w).ok_or_else(|| Error::OffSupport { state: x.encode(inst.vocab()) })
}

/// Exact posteriors at every masked position in one pass over the support.
fn exact_table(inst: &TaskInstance, x: &MaskedSeq) -> Result<Option<Vec<(usize, TokenPosterior)>>> {
    let idx = x.mask_indices();
    let m = inst.vocab().size();
    let mut w = vec![vec![0.0; m]; idx.len()];
    for (ans, p) in inst.support() {
        if consistent(ans, x) {
            for (k, &a) in idx.iter().enumerate() {
                w[k][ans.get(a).unwrap_or(0) as usize] += p;
            }
        }
    }
    let mut out = Vec::with_capacity(idx.len());
    for (k, row) in w.into_iter().enumerate() {
        match TokenPosterior::from_weights(row) {
            Some(p) => out.push((idx[k], p)),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

fn temper(p: TokenPosterior, gamma: f64) -> TokenPosterior {
    if gamma == 1.0 {
        return p;
    }
    let w: Vec<f64> = p.probs.iter().map(|&q| libm::pow(q, gamma)).collect();
    TokenPosterior::from_weights(w).expect("a tempered posterior keeps positive mass")
}

fn windowed_posterior(inst: &TaskInstance, window: usize, x: &MaskedSeq, a: usize) -> Result<TokenPosterior> {
    check_query(inst, x, a)?;
    let len = inst.len();
    let loc = inst.locality();
    let inside: Vec<bool> = (0..len).map(|i| loc.distance(i, a) <= window).collect();
    if inside.iter().all(|&b| b) {
        return exact_posterior(inst, x, a).or_else(|_| Ok(TokenPosterior::uniform(inst.vocab())));
    }
    let kept: Vec<_> = inst.clues().iter().filter(|c| c.footprint(len).iter().all(|&p| inside[p])).collect();
    let m = inst.vocab().size();
    let mut w = vec![0.0; m];
    match inst.universe() {
        Universe::Explicit(entries) => {
            let mut cells: Vec<Option<Token>> = vec![None; len];
            for (ans, weight) in entries {
                let agrees = (0..len).all(|i| !inside[i] || x.get(i).map_or(true, |t| t == ans[i]));
                if !agrees {
                    continue;
                }
                for (c, &t) in cells.iter_mut().zip(ans) {
                    *c = Some(t);
                }
                if kept.iter().all(|c| c.holds(&cells)) {
                    w[ans[a] as usize] += weight;
                }
            }
        }
        Universe::Product(unary) => {
            let free: Vec<usize> = (0..len).filter(|&i| inside[i] && x.is_masked(i)).collect();
            let mut cells: Vec<Option<Token>> = (0..len).map(|i| if inside[i] { x.get(i) } else { None }).collect();
            let mut digits = vec![0 as Token; free.len()];
            loop {
                for (&i, &d) in free.iter().zip(&digits) {
                    cells[i] = Some(d);
                }
                if kept.iter().all(|c| c.holds(&cells)) {
                    let weight: f64 = free.iter().zip(&digits).map(|(&i, &d)| unary[i][d as usize]).product();
                    w[cells[a].unwrap_or(0) as usize] += weight;
                }
                if !odometer(&mut digits, m) {
                    break;
                }
            }
        }
    }
    Ok(TokenPosterior::from_weights(w).unwrap_or_else(|| TokenPosterior::uniform(inst.vocab())))
}

/// Posterior of the corrupted denoiser `spec` over `inst`.
pub fn corrupted_posterior(inst: &TaskInstance, spec: DenoiserSpec, x: &MaskedSeq, a: usize) -> Result<TokenPosterior> {
    match spec {
        DenoiserSpec::Exact => exact_posterior(inst, x, a),
        DenoiserSpec::Tempered { gamma } => match exact_posterior(inst, x, a) {
            Ok(p) => Ok(temper(p, gamma)),
            Err(Error::OffSupport { .. }) => Ok(TokenPosterior::uniform(inst.vocab())),
            Err(e) => Err(e),
        },
        DenoiserSpec::Windowed { window } => windowed_posterior(inst, window, x, a),
    }
}

/// A denoiser spec bound to a task instance.
#[derive(Clone, Copy, Debug)]
pub struct TaskDenoiser<'a> {
    inst: &'a TaskInstance,
    spec: DenoiserSpec,
}

impl<'a> TaskDenoiser<'a> {
    pub fn new(inst: &'a TaskInstance, spec: DenoiserSpec) -> Result<Self> {
        spec.validate(inst.len())?;
        Ok(Self { inst, spec })
    }

    pub fn exact(inst: &'a TaskInstance) -> Self {
        Self { inst, spec: DenoiserSpec::Exact }
    }

    pub fn instance(&self) -> &'a TaskInstance {
        self.inst
    }

    pub fn spec(&self) -> DenoiserSpec {
        self.spec
    }
}

impl Denoiser for TaskDenoiser<'_> {
    fn vocab(&self) -> Vocab {
        self.inst.vocab()
    }

    fn len(&self) -> usize {
        self.inst.len()
    }

    fn posterior(&self, x: &MaskedSeq, a: usize) -> Result<TokenPosterior> {
        corrupted_posterior(self.inst, self.spec, x, a)
    }

    fn table(&self, x: &MaskedSeq) -> Result<PosteriorTable> {
        let gamma = match self.spec {
            DenoiserSpec::Exact => None,
            DenoiserSpec::Tempered { gamma } => Some(gamma),
            DenoiserSpec::Windowed { .. } => {
                let mut entries = Vec::new();
                for a in x.mask_indices().iter().copied() {
                    entries.push((a, self.posterior(x, a)?));
                }
                return Ok(PosteriorTable { entries });
            }
        };
        if x.len() != self.inst.len() {
            return Err(contract(alloc::format!("state length {} != {}", x.len(), self.inst.len())));
        }
        match (exact_table(self.inst, x)?, gamma) {
            (Some(rows), None) => Ok(PosteriorTable { entries: rows }),
            (None, None) => Err(Error::OffSupport { state: x.encode(self.inst.vocab()) }),
            (Some(rows), Some(g)) => {
                Ok(PosteriorTable { entries: rows.into_iter().map(|(a, p)| (a, temper(p, g))).collect() })
            }
            (None, Some(_)) => Ok(PosteriorTable {
                entries: x.mask_indices().iter().map(|&a| (a, TokenPosterior::uniform(self.inst.vocab()))).collect(),
            }),
        }
    }
}

/// Memoizing wrapper with a capacity bound; the memo is cleared when full.
///
/// The memo uses interior mutability and is not shared across threads;
/// concurrent workers each hold their own wrapper.
#[derive(Debug)]
pub struct CachedDenoiser<D> {
    inner: D,
    tables: RefCell<BTreeMap<MaskedSeq, PosteriorTable>>,
    capacity: usize,
}

impl<D: Denoiser> CachedDenoiser<D> {
    pub fn new(inner: D, capacity: usize) -> Self {
        Self { inner, tables: RefCell::new(BTreeMap::new()), capacity: capacity.max(1) }
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }

    pub fn cached_states(&self) -> usize {
        self.tables.borrow().len()
    }
}

impl<D: Denoiser> Denoiser for CachedDenoiser<D> {
    fn vocab(&self) -> Vocab {
        self.inner.vocab()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn posterior(&self, x: &MaskedSeq, a: usize) -> Result<TokenPosterior> {
        if let Some(p) = self.tables.borrow().get(x).and_then(|t| t.get(a)) {
            return Ok(p.clone());
        }
        self.inner.posterior(x, a)
    }

    fn table(&self, x: &MaskedSeq) -> Result<PosteriorTable> {
        if let Some(t) = self.tables.borrow().get(x) {
            return Ok(t.clone());
        }
        let t = self.inner.table(x)?;
        let mut memo = self.tables.borrow_mut();
        if memo.len() >= self.capacity {
            memo.clear();
        }
        memo.insert(x.clone(), t.clone());
        Ok(t)
    }
}
