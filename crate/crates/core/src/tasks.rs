//! Toy task families with exactly enumerable answer distributions.
//!
//! Each [`TaskInstance`] folds its prompt into a set of [`Clue`]s over a
//! prior [`Universe`] of answers. The support is the prior restricted to
//! answers that satisfy every clue, renormalized.
//!
//! - `latin4`: 4×4 Latin squares with revealed cells as clues.
//! - `zebra2`: two houses with a name and a food each, slot layout
//!   `[h1.name, h1.food, h2.name, h2.food]`. Names are `Robert = 0`,
//!   `Tom = 1`; foods are `hamburger = 0`, `pizza = 1`.
//! - `factorized`: chains with per-position unary weights and deterministic
//!   links `x[i+1] = f(x[i])` between neighbours.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::seq::{MaskedSeq, Token, Vocab, DEFAULT_ENUMERATION_CAP};

/// How a complete answer is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// 1 iff the answer lies in the support.
    BinaryExact,
    /// Fraction of positions agreeing with the reference answer.
    FractionCorrect,
}

/// A constraint on answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Clue {
    /// `x[pos] = token`.
    Fixed { pos: usize, token: Token },
    /// `x[to] = map[x[from]]`.
    Link { from: usize, to: usize, map: Vec<Token> },
    /// Some house has both this name and this food (zebra slot layout).
    SameHouse { name: Token, food: Token },
}

impl Clue {
    /// Positions the clue reads.
    pub fn footprint(&self, len: usize) -> Vec<usize> {
        match self {
            Clue::Fixed { pos, .. } => vec![*pos],
            Clue::Link { from, to, .. } => {
                let (a, b) = if from <= to { (*from, *to) } else { (*to, *from) };
                if a == b {
                    vec![a]
                } else {
                    vec![a, b]
                }
            }
            Clue::SameHouse { .. } => (0..len).collect(),
        }
    }

    /// Whether the clue holds; every footprint cell must be assigned.
    pub fn holds(&self, x: &[Option<Token>]) -> bool {
        match self {
            Clue::Fixed { pos, token } => x[*pos] == Some(*token),
            Clue::Link { from, to, map } => match (x[*from], x[*to]) {
                (Some(a), Some(b)) => map.get(a as usize) == Some(&b),
                _ => false,
            },
            Clue::SameHouse { name, food } => {
                x.chunks(2).any(|h| h.len() == 2 && h[0] == Some(*name) && h[1] == Some(*food))
            }
        }
    }

    fn check(&self, len: usize, vocab: Vocab) -> Result<()> {
        let in_range = self.footprint(len).iter().all(|&p| p < len);
        let ok = in_range
            && match self {
                Clue::Fixed { token, .. } => vocab.contains(*token),
                Clue::Link { map, .. } => map.len() == vocab.size() && map.iter().all(|&t| vocab.contains(t)),
                Clue::SameHouse { name, food } => len % 2 == 0 && vocab.contains(*name) && vocab.contains(*food),
            };
        if ok {
            Ok(())
        } else {
            Err(contract(alloc::format!("clue {self:?} invalid for length {len}, vocabulary {}", vocab.size())))
        }
    }
}

/// Distance between positions, used by windowed denoisers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Locality {
    /// `|i - j|`.
    Chain,
    /// Manhattan distance on a row-major grid with `cols` columns.
    Grid { cols: usize },
}

impl Locality {
    pub fn distance(self, i: usize, j: usize) -> usize {
        match self {
            Locality::Chain => i.abs_diff(j),
            Locality::Grid { cols } => (i / cols).abs_diff(j / cols) + (i % cols).abs_diff(j % cols),
        }
    }
}

/// Prior over answers before clues are applied.
#[derive(Clone, Debug, PartialEq)]
pub enum Universe {
    /// Listed answers with unnormalized weights.
    Explicit(Vec<(Vec<Token>, f64)>),
    /// Independent positions; `weights[i][t]` is the unnormalized weight of token `t` at `i`.
    Product(Vec<Vec<f64>>),
}

/// Family and generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum FamilySpec {
    /// 4×4 Latin squares. With fraction-correct reward, `givens` is a floor
    /// and further cells are revealed until the completion is unique.
    Latin4 {
        givens: usize,
        #[serde(default = "binary_exact")]
        reward: RewardKind,
    },
    /// Two-house puzzle. Without explicit clues, true clues about a random
    /// hidden solution are added until it is unique.
    Zebra2 {
        #[serde(default)]
        clues: Option<Vec<Clue>>,
        #[serde(default = "fraction_correct")]
        reward: RewardKind,
    },
    /// Chain with unary weights `exp(unary_strength · z)`, `z ~ N(0, 1)`, and
    /// each neighbour pair linked by a random map with probability `coupling`.
    Factorized {
        length: usize,
        vocab: usize,
        coupling: f64,
        unary_strength: f64,
        #[serde(default = "binary_exact")]
        reward: RewardKind,
    },
}

fn binary_exact() -> RewardKind {
    RewardKind::BinaryExact
}

fn fraction_correct() -> RewardKind {
    RewardKind::FractionCorrect
}

impl FamilySpec {
    pub fn name(&self) -> &'static str {
        match self {
            FamilySpec::Latin4 { .. } => "latin4",
            FamilySpec::Zebra2 { .. } => "zebra2",
            FamilySpec::Factorized { .. } => "factorized",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilySpec::Latin4 { givens, .. } if *givens > 16 => {
                Err(Error::InvalidConfig(alloc::format!("latin4 givens {givens} > 16")))
            }
            FamilySpec::Factorized { length, vocab, coupling, unary_strength, .. } => {
                Vocab::new(*vocab).map_err(|_| Error::InvalidConfig(alloc::format!("vocab {vocab}")))?;
                if *length == 0 || *length > 63 {
                    return Err(Error::InvalidConfig(alloc::format!("length {length} outside 1..=63")));
                }
                if !(0.0..=1.0).contains(coupling) {
                    return Err(Error::InvalidConfig(alloc::format!("coupling {coupling} outside [0, 1]")));
                }
                if !(unary_strength.is_finite() && *unary_strength >= 0.0) {
                    return Err(Error::InvalidConfig(alloc::format!("unary_strength {unary_strength}")));
                }
                let answers = (*vocab as u128).checked_pow(*length as u32).unwrap_or(u128::MAX);
                if answers > DEFAULT_ENUMERATION_CAP as u128 {
                    return Err(Error::CapExceeded { states: answers, cap: DEFAULT_ENUMERATION_CAP });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A family with a seed: a reproducible stream of instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub spec: FamilySpec,
    pub seed: u64,
}

impl TaskFamily {
    pub fn new(spec: FamilySpec, seed: u64) -> Self {
        Self { spec, seed }
    }

    /// The `index`-th instance of the stream.
    pub fn instance(&self, index: u64) -> Result<TaskInstance> {
        sample_prompt(&self.spec, &mut crate::stream_rng(self.seed, index))
    }
}

/// One prompt with its exact answer distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    prompt_id: u64,
    family: &'static str,
    vocab: Vocab,
    len: usize,
    support: Vec<(MaskedSeq, f64)>,
    reward_kind: RewardKind,
    reference: MaskedSeq,
    clues: Vec<Clue>,
    universe: Universe,
    locality: Locality,
}

/// Run-log record describing an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub family: String,
    pub seed: u64,
    pub clues: Vec<Clue>,
    #[serde(rename = "L")]
    pub len: usize,
    pub m: usize,
    pub support_size: usize,
}

impl TaskInstance {
    /// Instance from a prior and clues; the support is computed here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prompt_id: u64,
        family: &'static str,
        len: usize,
        vocab: Vocab,
        universe: Universe,
        clues: Vec<Clue>,
        reward_kind: RewardKind,
        locality: Locality,
    ) -> Result<Self> {
        for c in &clues {
            c.check(len, vocab)?;
        }
        let support = compute_support(len, vocab, &universe, &clues)?;
        if support.is_empty() {
            return Err(Error::Infeasible(alloc::format!("no answer satisfies the {} clues", clues.len())));
        }
        if reward_kind == RewardKind::FractionCorrect && support.len() > 1 {
            return Err(Error::InvalidConfig(alloc::format!(
                "fraction-correct reward needs a unique answer, support has {}",
                support.len()
            )));
        }
        let reference = reference_answer(&support);
        Ok(Self { prompt_id, family, vocab, len, support, reward_kind, reference, clues, universe, locality })
    }

    pub fn prompt_id(&self) -> u64 {
        self.prompt_id
    }

    pub fn family(&self) -> &'static str {
        self.family
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reward_kind(&self) -> RewardKind {
        self.reward_kind
    }

    pub fn clues(&self) -> &[Clue] {
        &self.clues
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn locality(&self) -> Locality {
        self.locality
    }

    /// Maximum-probability answer, lowest lexicographically among ties.
    pub fn reference(&self) -> &MaskedSeq {
        &self.reference
    }

    /// Support answers with probabilities, lexicographic by answer.
    pub fn support(&self) -> &[(MaskedSeq, f64)] {
        &self.support
    }

    /// Probability of a complete answer under the data distribution.
    pub fn data_prob(&self, x0: &MaskedSeq) -> f64 {
        match self.support.binary_search_by(|(a, _)| a.cmp(x0)) {
            Ok(i) => self.support[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn export_record(&self) -> InstanceRecord {
        InstanceRecord {
            family: self.family.into(),
            seed: self.prompt_id,
            clues: self.clues.clone(),
            len: self.len,
            m: self.vocab.size(),
            support_size: self.support.len(),
        }
    }
}

/// Stored support of `inst`, lexicographic by answer.
pub fn enumerate_support(inst: &TaskInstance) -> &[(MaskedSeq, f64)] {
    inst.support()
}

/// Reward of the complete answer `x0`.
pub fn reward(inst: &TaskInstance, x0: &MaskedSeq) -> Result<f64> {
    if x0.len() != inst.len {
        return Err(contract(alloc::format!("answer length {} != {}", x0.len(), inst.len)));
    }
    if !x0.is_complete() {
        return Err(contract("answer contains a mask"));
    }
    x0.validate(inst.vocab)?;
    Ok(match inst.reward_kind {
        RewardKind::BinaryExact => {
            if inst.data_prob(x0) > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        RewardKind::FractionCorrect => {
            let hits = x0.cells().iter().zip(inst.reference.cells()).filter(|(a, b)| a == b).count();
            hits as f64 / inst.len as f64
        }
    })
}

/// Draw one instance of `spec`.
pub fn sample_prompt<R: Rng + ?Sized>(spec: &FamilySpec, rng: &mut R) -> Result<TaskInstance> {
    spec.validate()?;
    let prompt_id = rng.gen::<u64>();
    match spec {
        FamilySpec::Latin4 { givens, reward } => latin4(prompt_id, *givens, *reward, rng),
        FamilySpec::Zebra2 { clues: Some(clues), reward } => zebra2_with_clues(prompt_id, clues.clone(), *reward),
        FamilySpec::Zebra2 { clues: None, reward } => zebra2_random(prompt_id, *reward, rng),
        FamilySpec::Factorized { length, vocab, coupling, unary_strength, reward } => {
            factorized(prompt_id, *length, *vocab, *coupling, *unary_strength, *reward, rng)
        }
    }
}

/// Zebra tokens.
pub mod zebra {
    use crate::seq::Token;
    pub const ROBERT: Token = 0;
    pub const TOM: Token = 1;
    pub const HAMBURGER: Token = 0;
    pub const PIZZA: Token = 1;
    pub const NAMES: [&str; 2] = ["Robert", "Tom"];
    pub const FOODS: [&str; 2] = ["hamburger", "pizza"];
    /// Slot of `house`'s name (`house` is 0-based).
    pub const fn name_slot(house: usize) -> usize {
        2 * house
    }
    pub const fn food_slot(house: usize) -> usize {
        2 * house + 1
    }
}

/// The two-house puzzle "the first house is Robert's; Tom likes pizza".
pub fn zebra2_example() -> TaskInstance {
    let clues = vec![
        Clue::Fixed { pos: zebra::name_slot(0), token: zebra::ROBERT },
        Clue::SameHouse { name: zebra::TOM, food: zebra::PIZZA },
    ];
    zebra2_with_clues(0, clues, RewardKind::FractionCorrect).expect("example clues are consistent")
}

fn zebra2_universe() -> Vec<(Vec<Token>, f64)> {
    let perms = [[0u8, 1], [1, 0]];
    let mut out = Vec::new();
    for names in perms {
        for foods in perms {
            out.push((vec![names[0], foods[0], names[1], foods[1]], 1.0));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn zebra2_with_clues(prompt_id: u64, clues: Vec<Clue>, reward: RewardKind) -> Result<TaskInstance> {
    let vocab = Vocab::new(2)?;
    TaskInstance::new(
        prompt_id,
        "zebra2",
        4,
        vocab,
        Universe::Explicit(zebra2_universe()),
        clues,
        reward,
        Locality::Chain,
    )
}

fn zebra2_random<R: Rng + ?Sized>(prompt_id: u64, reward: RewardKind, rng: &mut R) -> Result<TaskInstance> {
    let universe = zebra2_universe();
    let hidden = universe[rng.gen_range(0..universe.len())].0.clone();
    let mut pool: Vec<Clue> = (0..4).map(|pos| Clue::Fixed { pos, token: hidden[pos] }).collect();
    for h in 0..2 {
        pool.push(Clue::SameHouse { name: hidden[zebra::name_slot(h)], food: hidden[zebra::food_slot(h)] });
    }
    pool.shuffle(rng);
    let clues = reveal_until_unique(&universe, pool)?;
    zebra2_with_clues(prompt_id, clues, reward)
}

/// Shortest prefix of `pool` that leaves exactly one answer.
fn reveal_until_unique(universe: &[(Vec<Token>, f64)], pool: Vec<Clue>) -> Result<Vec<Clue>> {
    let mut alive: Vec<Vec<Option<Token>>> =
        universe.iter().map(|(a, _)| a.iter().copied().map(Some).collect()).collect();
    let mut clues = Vec::new();
    for clue in pool {
        if alive.len() == 1 {
            break;
        }
        alive.retain(|a| clue.holds(a));
        clues.push(clue);
    }
    if alive.len() == 1 {
        Ok(clues)
    } else {
        Err(Error::Infeasible(alloc::format!("{} answers remain after all clues", alive.len())))
    }
}

/// All Latin squares of order `n`, row-major, in lexicographic order.
pub fn latin_squares(n: usize) -> Vec<Vec<Token>> {
    fn fill(grid: &mut Vec<Token>, n: usize, out: &mut Vec<Vec<Token>>) {
        let cell = grid.len();
        if cell == n * n {
            out.push(grid.clone());
            return;
        }
        let (r, c) = (cell / n, cell % n);
        for t in 0..n as Token {
            let row_ok = (0..c).all(|j| grid[r * n + j] != t);
            let col_ok = (0..r).all(|i| grid[i * n + c] != t);
            if row_ok && col_ok {
                grid.push(t);
                fill(grid, n, out);
                grid.pop();
            }
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::with_capacity(n * n), n, &mut out);
    out
}

fn latin4<R: Rng + ?Sized>(prompt_id: u64, givens: usize, reward: RewardKind, rng: &mut R) -> Result<TaskInstance> {
    let squares: Vec<(Vec<Token>, f64)> = latin_squares(4).into_iter().map(|s| (s, 1.0)).collect();
    let hidden = squares[rng.gen_range(0..squares.len())].0.clone();
    let mut cells: Vec<usize> = (0..16).collect();
    cells.shuffle(rng);
    let pool: Vec<Clue> = cells.iter().map(|&pos| Clue::Fixed { pos, token: hidden[pos] }).collect();
    let clues = match reward {
        RewardKind::BinaryExact => pool[..givens].to_vec(),
        RewardKind::FractionCorrect => {
            let mut needed = reveal_until_unique(&squares, pool.clone())?;
            if needed.len() < givens {
                needed = pool[..givens].to_vec();
            }
            needed
        }
    };
    TaskInstance::new(
        prompt_id,
        "latin4",
        16,
        Vocab::new(4)?,
        Universe::Explicit(squares),
        clues,
        reward,
        Locality::Grid { cols: 4 },
    )
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn factorized<R: Rng + ?Sized>(
    prompt_id: u64,
    len: usize,
    m: usize,
    coupling: f64,
    strength: f64,
    reward: RewardKind,
    rng: &mut R,
) -> Result<TaskInstance> {
    let vocab = Vocab::new(m)?;
    let mut weights = Vec::with_capacity(len);
    for _ in 0..len {
        let row: Vec<f64> = (0..m)
            .map(|_| {
                let z = standard_normal(rng);
                if strength == 0.0 {
                    1.0
                } else {
                    libm::exp(strength * z)
                }
            })
            .collect();
        weights.push(row);
    }
    let mut clues = Vec::new();
    for i in 0..len.saturating_sub(1) {
        let linked = rng.gen::<f64>() < coupling;
        let map: Vec<Token> = (0..m).map(|_| rng.gen_range(0..m) as Token).collect();
        if linked {
            clues.push(Clue::Link { from: i, to: i + 1, map });
        }
    }
    TaskInstance::new(prompt_id, "factorized", len, vocab, Universe::Product(weights), clues, reward, Locality::Chain)
}

fn compute_support(len: usize, vocab: Vocab, universe: &Universe, clues: &[Clue]) -> Result<Vec<(MaskedSeq, f64)>> {
    let mut raw: Vec<(MaskedSeq, f64)> = Vec::new();
    match universe {
        Universe::Explicit(entries) => {
            for (a, w) in entries {
                if a.len() != len || a.iter().any(|&t| !vocab.contains(t)) {
                    return Err(contract("universe entry does not match length or vocabulary"));
                }
                let cells: Vec<Option<Token>> = a.iter().copied().map(Some).collect();
                if *w > 0.0 && clues.iter().all(|c| c.holds(&cells)) {
                    raw.push((MaskedSeq::from_cells(cells), *w));
                }
            }
        }
        Universe::Product(weights) => {
            if weights.len() != len || weights.iter().any(|r| r.len() != vocab.size()) {
                return Err(contract("unary table does not match length or vocabulary"));
            }
            let m = vocab.size();
            let total = (m as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
            if total > DEFAULT_ENUMERATION_CAP as u128 {
                return Err(Error::CapExceeded { states: total, cap: DEFAULT_ENUMERATION_CAP });
            }
            let mut digits = vec![0 as Token; len];
            let mut cells = vec![Some(0 as Token); len];
            loop {
                for (c, &d) in cells.iter_mut().zip(&digits) {
                    *c = Some(d);
                }
                if clues.iter().all(|c| c.holds(&cells)) {
                    let w: f64 = digits.iter().enumerate().map(|(i, &t)| weights[i][t as usize]).product();
                    if w > 0.0 {
                        raw.push((MaskedSeq::from_cells(cells.clone()), w));
                    }
                }
                if !odometer(&mut digits, m) {
                    break;
                }
            }
        }
    }
    raw.sort_by(|a, b| a.0.cmp(&b.0));
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    for e in &mut raw {
        e.1 /= total;
    }
    Ok(raw)
}

/// Advance a base-`m` counter, last digit fastest; false on wrap-around.
pub(crate) fn odometer(digits: &mut [Token], m: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if (*d as usize) < m {
            return true;
        }
        *d = 0;
    }
    false
}

fn reference_answer(support: &[(MaskedSeq, f64)]) -> MaskedSeq {
    let mut best = &support[0];
    for e in &support[1..] {
        if e.1 > best.1 {
            best = e;
        }
    }
    best.0.clone()
}
