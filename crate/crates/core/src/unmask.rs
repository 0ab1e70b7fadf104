//! Unmasking policies, the one-step transition kernel and rollouts.
//!
//! A policy maps a state and the posterior table of its candidate positions
//! to an [`IndexDistribution`]. All argmax and Top-K selections break ties
//! toward the lowest position.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, PosteriorTable, TokenPosterior};
use crate::error::{contract, Error, Result};
use crate::seq::{MaskedSeq, Token, Vocab};
use crate::tasks::{reward, TaskInstance};

/// Probabilities over candidate positions, ascending by position.
///
/// Entries may hold zero; positions not listed have probability zero.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexDistribution {
    entries: Vec<(usize, f64)>,
}

impl IndexDistribution {
    /// Validates non-negativity, strictly increasing positions and total mass 1 within 1e-9.
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        let total: f64 = entries.iter().map(|e| e.1).sum();
        let ordered = entries.windows(2).all(|w| w[0].0 < w[1].0);
        if entries.is_empty() || !ordered || entries.iter().any(|e| !(e.1 >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(contract(alloc::format!("not an index distribution: {entries:?}")));
        }
        Ok(Self { entries })
    }

    pub(crate) fn from_weights(indices: &[usize], weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        Self { entries: indices.iter().zip(weights).map(|(&i, &w)| (i, w / total)).collect() }
    }

    fn point_mass(indices: &[usize], chosen: usize) -> Self {
        Self { entries: indices.iter().map(|&i| (i, if i == chosen { 1.0 } else { 0.0 })).collect() }
    }

    fn uniform_over(indices: &[usize], chosen: &[usize]) -> Self {
        let p = 1.0 / chosen.len() as f64;
        Self { entries: indices.iter().map(|&i| (i, if chosen.contains(&i) { p } else { 0.0 })).collect() }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.entries.binary_search_by_key(&index, |e| e.0).map_or(0.0, |i| self.entries[i].1)
    }

    /// Positions with positive probability.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().filter(|e| e.1 > 0.0).map(|e| e.0)
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        let mut idx: Vec<usize> = self.entries.iter().chain(&other.entries).map(|e| e.0).collect();
        idx.sort_unstable();
        idx.dedup();
        0.5 * idx.iter().map(|&i| (self.prob(i) - other.prob(i)).abs()).sum::<f64>()
    }
}

/// Anything that proposes the next position to unmask.
pub trait UnmaskPolicy {
    /// Distribution over the positions of `table`, which are masked in `x`.
    fn distribution(&self, x: &MaskedSeq, table: &PosteriorTable) -> Result<IndexDistribution>;
}

impl<P: UnmaskPolicy + ?Sized> UnmaskPolicy for &P {
    fn distribution(&self, x: &MaskedSeq, table: &PosteriorTable) -> Result<IndexDistribution> {
        (**self).distribution(x, table)
    }
}

/// Reference schedulers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Heuristic {
    /// Uniform over masked positions.
    Random,
    /// Highest maximum token probability.
    Confidence,
    /// Largest gap between the two most probable tokens.
    Margin,
    /// Lowest posterior entropy.
    Entropy,
    /// Softmax over positions of `sum_c exp(p_c / tau)`.
    Softmax { tau: f64 },
    /// Uniform over the `k` most confident positions.
    TopK { k: usize },
}

impl Heuristic {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Heuristic::Softmax { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::InvalidConfig(alloc::format!("softmax tau {tau} must be positive")))
            }
            Heuristic::TopK { k: 0 } => Err(Error::InvalidConfig("topk needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Heuristic::Random => f.write_str("random"),
            Heuristic::Confidence => f.write_str("confidence"),
            Heuristic::Margin => f.write_str("margin"),
            Heuristic::Entropy => f.write_str("entropy"),
            Heuristic::Softmax { tau } => write!(f, "softmax:{tau}"),
            Heuristic::TopK { k } => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for Heuristic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(alloc::format!("unknown scheduler {s:?}"));
        let h = match s.split_once(':') {
            None => match s {
                "random" => Heuristic::Random,
                "confidence" => Heuristic::Confidence,
                "margin" => Heuristic::Margin,
                "entropy" => Heuristic::Entropy,
                _ => return Err(bad()),
            },
            Some(("softmax", t)) => Heuristic::Softmax { tau: t.parse().map_err(|_| bad())? },
            Some(("topk", k)) => Heuristic::TopK { k: k.parse().map_err(|_| bad())? },
            Some(_) => return Err(bad()),
        };
        h.validate()?;
        Ok(h)
    }
}

impl Serialize for Heuristic {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Heuristic {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn nonempty(table: &PosteriorTable) -> Result<()> {
    if table.is_empty() {
        Err(contract("no masked positions"))
    } else {
        Ok(())
    }
}

/// Lowest position maximizing `score`.
fn argmax_by(table: &PosteriorTable, score: impl Fn(&TokenPosterior) -> f64) -> usize {
    let mut best = table.entries()[0].0;
    let mut best_score = score(&table.entries()[0].1);
    for (i, p) in &table.entries()[1..] {
        let s = score(p);
        if s > best_score {
            best = *i;
            best_score = s;
        }
    }
    best
}

/// Positions sorted by descending maximum probability, ties by position.
pub fn confidence_order(table: &PosteriorTable) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = table.entries().iter().map(|(i, p)| (*i, p.max_prob())).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.into_iter().map(|e| e.0).collect()
}

/// The `min(k, n)` most confident positions, ascending by position.
pub fn top_k_set(table: &PosteriorTable, k: usize) -> Vec<usize> {
    let mut set: Vec<usize> = confidence_order(table).into_iter().take(k).collect();
    set.sort_unstable();
    set
}

impl Heuristic {
    /// Distribution over the positions of `table`.
    pub fn from_table(&self, table: &PosteriorTable) -> Result<IndexDistribution> {
        nonempty(table)?;
        let idx = table.indices();
        Ok(match *self {
            Heuristic::Random => IndexDistribution::uniform_over(&idx, &idx),
            Heuristic::Confidence => IndexDistribution::point_mass(&idx, argmax_by(table, TokenPosterior::max_prob)),
            Heuristic::Margin => IndexDistribution::point_mass(&idx, argmax_by(table, TokenPosterior::margin)),
            Heuristic::Entropy => IndexDistribution::point_mass(&idx, argmax_by(table, |p| -p.entropy())),
            Heuristic::TopK { k } => {
                if k == 0 {
                    return Err(contract("topk needs k >= 1"));
                }
                IndexDistribution::uniform_over(&idx, &top_k_set(table, k))
            }
            Heuristic::Softmax { tau } => {
                if !(tau > 0.0) {
                    return Err(contract(alloc::format!("softmax tau {tau} must be positive")));
                }
                let shift = table
                    .entries()
                    .iter()
                    .flat_map(|(_, p)| p.probs().iter().map(move |q| q / tau))
                    .fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = table
                    .entries()
                    .iter()
                    .map(|(_, p)| p.probs().iter().map(|q| libm::exp(q / tau - shift)).sum())
                    .collect();
                IndexDistribution::from_weights(&idx, &w)
            }
        })
    }
}

impl UnmaskPolicy for Heuristic {
    fn distribution(&self, _x: &MaskedSeq, table: &PosteriorTable) -> Result<IndexDistribution> {
        self.from_table(table)
    }
}

/// Uniform over the masked positions of `x`.
pub fn g_rand(x: &MaskedSeq) -> Result<IndexDistribution> {
    let idx = x.mask_indices();
    if idx.is_empty() {
        return Err(contract("no masked positions"));
    }
    Ok(IndexDistribution::uniform_over(&idx, &idx))
}

pub fn g_conf<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq) -> Result<IndexDistribution> {
    Heuristic::Confidence.from_table(&den.table(x)?)
}

pub fn g_conf_tau<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq, tau: f64) -> Result<IndexDistribution> {
    Heuristic::Softmax { tau }.from_table(&den.table(x)?)
}

pub fn g_topk<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq, k: usize) -> Result<IndexDistribution> {
    Heuristic::TopK { k }.from_table(&den.table(x)?)
}

pub fn g_margin<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq) -> Result<IndexDistribution> {
    Heuristic::Margin.from_table(&den.table(x)?)
}

pub fn g_entropy<D: Denoiser + ?Sized>(den: &D, x: &MaskedSeq) -> Result<IndexDistribution> {
    Heuristic::Entropy.from_table(&den.table(x)?)
}

/// How the token at the chosen position is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Draw from the posterior.
    #[default]
    Sample,
    /// Take the most probable token, lowest on ties.
    Argmax,
}

/// Ordered bins of positions; rollouts unmask the earliest unfinished bin first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct BlockSchedule {
    bins: Vec<Vec<usize>>,
    len: usize,
}

impl BlockSchedule {
    /// Bins must partition `0..L` for some `L`.
    pub fn new(bins: Vec<Vec<usize>>) -> Result<Self> {
        let len: usize = bins.iter().map(Vec::len).sum();
        let mut seen = alloc::vec![false; len];
        for &p in bins.iter().flatten() {
            if p >= len || seen[p] {
                return Err(Error::InvalidConfig(alloc::format!("bins {bins:?} do not partition 0..{len}")));
            }
            seen[p] = true;
        }
        if bins.iter().any(Vec::is_empty) {
            return Err(Error::InvalidConfig("empty bin".into()));
        }
        Ok(Self { bins, len })
    }

    /// `count` contiguous bins of near-equal size.
    pub fn contiguous(len: usize, count: usize) -> Result<Self> {
        if count == 0 || count > len {
            return Err(Error::InvalidConfig(alloc::format!("{count} bins for length {len}")));
        }
        let bins = (0..count).map(|b| (b * len / count..(b + 1) * len / count).collect()).collect();
        Self::new(bins)
    }

    pub fn bins(&self) -> &[Vec<usize>] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Earliest bin that still holds a masked position of `x`.
    pub fn active(&self, x: &MaskedSeq) -> Option<&[usize]> {
        self.bins.iter().find(|b| b.iter().any(|&p| x.is_masked(p))).map(Vec::as_slice)
    }
}

impl TryFrom<Vec<Vec<usize>>> for BlockSchedule {
    type Error = Error;
    fn try_from(bins: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(bins)
    }
}

impl From<BlockSchedule> for Vec<Vec<usize>> {
    fn from(b: BlockSchedule) -> Self {
        b.bins
    }
}

/// Posterior table of the positions a policy may choose from at `x`.
pub fn candidate_table<D: Denoiser + ?Sized>(
    den: &D,
    x: &MaskedSeq,
    block: Option<&BlockSchedule>,
) -> Result<PosteriorTable> {
    let table = den.table(x)?;
    match block {
        None => Ok(table),
        Some(b) => {
            if b.len() != x.len() {
                return Err(contract(alloc::format!(
                    "block schedule covers {} positions, state has {}",
                    b.len(),
                    x.len()
                )));
            }
            let bin = b.active(x).ok_or_else(|| contract("no masked positions"))?;
            Ok(table.restrict(|i| bin.contains(&i)))
        }
    }
}

/// Outcome of one unmasking step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next: MaskedSeq,
    pub action: usize,
    pub token: Token,
    pub log_g: f64,
    pub log_pi: f64,
}

fn sample_categorical<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (k, w) in weights.enumerate() {
        if w > 0.0 {
            cum += w;
            last = k;
            if u < cum {
                return k;
            }
        }
    }
    last
}

/// Draw a position from `g` and a token from its posterior in `table`.
pub fn step<R: Rng + ?Sized>(
    x: &MaskedSeq,
    g: &IndexDistribution,
    table: &PosteriorTable,
    vocab: Vocab,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Step> {
    let k = sample_categorical(g.entries().iter().map(|e| e.1), rng);
    let (action, ga) = g.entries()[k];
    let post = table.get(action).ok_or_else(|| contract(alloc::format!("no posterior for position {action}")))?;
    let token = match decoding {
        Decoding::Sample => sample_categorical(post.probs().iter().copied(), rng) as Token,
        Decoding::Argmax => post.argmax(),
    };
    let next = x.apply_unmask(action, token, vocab)?;
    Ok(Step { next, action, token, log_g: libm::log(ga), log_pi: libm::log(post.prob(token)) })
}

/// Successor states of `x` under `g` with their probabilities.
pub fn kernel_row(
    g: &IndexDistribution,
    table: &PosteriorTable,
    x: &MaskedSeq,
    vocab: Vocab,
    decoding: Decoding,
) -> Result<Vec<(MaskedSeq, f64)>> {
    let mut row = Vec::new();
    for &(a, ga) in g.entries() {
        if ga <= 0.0 {
            continue;
        }
        let post = table.get(a).ok_or_else(|| contract(alloc::format!("no posterior for position {a}")))?;
        match decoding {
            Decoding::Sample => {
                for (c, &p) in post.probs().iter().enumerate() {
                    if p > 0.0 {
                        row.push((x.apply_unmask(a, c as Token, vocab)?, ga * p));
                    }
                }
            }
            Decoding::Argmax => row.push((x.apply_unmask(a, post.argmax(), vocab)?, ga)),
        }
    }
    Ok(row)
}

/// One generation from the all-masked state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u64,
    /// `x_L, ..., x_0`.
    pub states: Vec<MaskedSeq>,
    /// Candidate posterior tables seen at `x_L, ..., x_1`.
    pub tables: Vec<PosteriorTable>,
    pub actions: Vec<usize>,
    pub tokens: Vec<Token>,
    pub log_g: Vec<f64>,
    pub log_pi: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn output(&self) -> &MaskedSeq {
        self.states.last().expect("a trajectory has at least one state")
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Generate one answer for `inst` with `policy` over `den`.
pub fn rollout<P, D, R>(
    inst: &TaskInstance,
    policy: &P,
    den: &D,
    block: Option<&BlockSchedule>,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Trajectory>
where
    P: UnmaskPolicy + ?Sized,
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let len = inst.len();
    let mut x = MaskedSeq::all_masked(len);
    let mut t = Trajectory {
        prompt_id: inst.prompt_id(),
        states: Vec::with_capacity(len + 1),
        tables: Vec::with_capacity(len),
        actions: Vec::with_capacity(len),
        tokens: Vec::with_capacity(len),
        log_g: Vec::with_capacity(len),
        log_pi: Vec::with_capacity(len),
        reward: 0.0,
    };
    t.states.push(x.clone());
    while x.mask_count() > 0 {
        let table = candidate_table(den, &x, block)?;
        let g = policy.distribution(&x, &table)?;
        let s = step(&x, &g, &table, inst.vocab(), decoding, rng)?;
        x = s.next;
        t.states.push(x.clone());
        t.tables.push(table);
        t.actions.push(s.action);
        t.tokens.push(s.token);
        t.log_g.push(s.log_g);
        t.log_pi.push(s.log_pi);
    }
    t.reward = reward(inst, &x)?;
    Ok(t)
}
