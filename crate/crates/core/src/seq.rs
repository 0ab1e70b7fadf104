//! Masked sequences and the state lattice.
//!
//! A state is a fixed-length sequence whose entries are either a token in
//! `0..m` or the mask sentinel. The serialized form encodes the mask as `m`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, Range};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// A token id in `0..m`.
pub type Token = u8;

/// Default bound on the number of states an enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Vocabulary of `m` tokens plus the mask sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocab {
    size: u8,
}

impl Vocab {
    /// Vocabulary with `size` tokens; `2 <= size <= 254`.
    pub fn new(size: usize) -> Result<Self> {
        if !(2..=254).contains(&size) {
            return Err(contract(alloc::format!("vocabulary size {size} outside 2..=254")));
        }
        Ok(Self { size: size as u8 })
    }

    pub fn size(self) -> usize {
        self.size as usize
    }

    /// Serialized code of the mask sentinel.
    pub fn mask_code(self) -> u8 {
        self.size
    }

    pub fn contains(self, token: Token) -> bool {
        token < self.size
    }

    pub fn tokens(self) -> Range<Token> {
        0..self.size
    }
}

impl TryFrom<usize> for Vocab {
    type Error = Error;
    fn try_from(size: usize) -> Result<Self> {
        Self::new(size)
    }
}

impl From<Vocab> for usize {
    fn from(v: Vocab) -> usize {
        v.size()
    }
}

/// Strictly increasing masked positions of a state.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MaskIndexList(Vec<usize>);

impl MaskIndexList {
    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for MaskIndexList {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// A length-`L` sequence of tokens and masks.
///
/// Ordering is lexicographic with the mask below every token, so complete
/// answers sort by their token values.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MaskedSeq {
    cells: Vec<Option<Token>>,
}

impl MaskedSeq {
    pub fn all_masked(len: usize) -> Self {
        Self { cells: vec![None; len] }
    }

    pub fn from_cells(cells: Vec<Option<Token>>) -> Self {
        Self { cells }
    }

    /// A mask-free sequence.
    pub fn from_tokens(tokens: &[Token]) -> Self {
        Self { cells: tokens.iter().copied().map(Some).collect() }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Option<Token>] {
        &self.cells
    }

    pub fn get(&self, pos: usize) -> Option<Token> {
        self.cells[pos]
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.cells[pos].is_none()
    }

    pub fn mask_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }

    pub fn mask_indices(&self) -> MaskIndexList {
        MaskIndexList(self.cells.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(i, _)| i).collect())
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Token values of a mask-free sequence.
    pub fn tokens(&self) -> Option<Vec<Token>> {
        self.cells.iter().copied().collect()
    }

    /// Copy of `self` with `token` written at the masked position `pos`.
    pub fn apply_unmask(&self, pos: usize, token: Token, vocab: Vocab) -> Result<Self> {
        match self.cells.get(pos) {
            None => Err(contract(alloc::format!("position {pos} out of range for length {}", self.len()))),
            Some(Some(_)) => Err(contract(alloc::format!("position {pos} not masked"))),
            Some(None) if !vocab.contains(token) => {
                Err(contract(alloc::format!("token {token} invalid for vocabulary of size {}", vocab.size())))
            }
            Some(None) => {
                let mut cells = self.cells.clone();
                cells[pos] = Some(token);
                Ok(Self { cells })
            }
        }
    }

    pub fn validate(&self, vocab: Vocab) -> Result<()> {
        match self.cells.iter().flatten().find(|&&t| !vocab.contains(t)) {
            Some(t) => Err(contract(alloc::format!("token {t} invalid for vocabulary of size {}", vocab.size()))),
            None => Ok(()),
        }
    }

    /// Dense integer codes with the mask encoded as `m`.
    pub fn encode(&self, vocab: Vocab) -> Vec<u8> {
        self.cells.iter().map(|c| c.unwrap_or(vocab.mask_code())).collect()
    }

    pub fn decode(codes: &[u8], vocab: Vocab) -> Result<Self> {
        let mut cells = Vec::with_capacity(codes.len());
        for &c in codes {
            if c == vocab.mask_code() {
                cells.push(None);
            } else if vocab.contains(c) {
                cells.push(Some(c));
            } else {
                return Err(contract(alloc::format!("code {c} invalid for vocabulary of size {}", vocab.size())));
            }
        }
        Ok(Self { cells })
    }
}

/// `(m+1)^L`, saturating.
pub fn lattice_size(len: usize, vocab: Vocab) -> u128 {
    let base = vocab.size() as u128 + 1;
    let mut n: u128 = 1;
    for _ in 0..len {
        n = n.saturating_mul(base);
    }
    n
}

/// Every state of length `len`, grouped by descending mask count.
///
/// Within a layer, masked-position sets come in lexicographic order and the
/// remaining positions count up like an odometer with the last position
/// fastest.
pub fn enumerate_states(len: usize, vocab: Vocab, cap: u64) -> Result<StateLattice> {
    let states = lattice_size(len, vocab);
    if states > cap as u128 {
        return Err(Error::CapExceeded { states, cap });
    }
    Ok(StateLattice::new(len, vocab))
}

/// Iterator returned by [`enumerate_states`].
#[derive(Clone, Debug)]
pub struct StateLattice {
    len: usize,
    vocab: Vocab,
    layer: usize,
    combo: Vec<usize>,
    digits: Vec<Token>,
    done: bool,
}

impl StateLattice {
    fn new(len: usize, vocab: Vocab) -> Self {
        let mut it = Self { len, vocab, layer: len, combo: Vec::new(), digits: Vec::new(), done: false };
        it.start_layer();
        it
    }

    fn start_layer(&mut self) {
        self.combo = (0..self.layer).collect();
        self.digits = vec![0; self.len - self.layer];
    }

    fn current(&self) -> MaskedSeq {
        let mut cells = vec![None; self.len];
        let mut d = self.digits.iter();
        let mut masked = self.combo.iter().peekable();
        for (i, cell) in cells.iter_mut().enumerate() {
            if masked.peek() == Some(&&i) {
                masked.next();
            } else {
                *cell = d.next().copied();
            }
        }
        MaskedSeq { cells }
    }

    fn advance(&mut self) {
        let m = self.vocab.size() as Token;
        for d in self.digits.iter_mut().rev() {
            *d += 1;
            if *d < m {
                return;
            }
            *d = 0;
        }
        if next_combination(&mut self.combo, self.len) {
            return;
        }
        if self.layer == 0 {
            self.done = true;
        } else {
            self.layer -= 1;
            self.start_layer();
        }
    }
}

impl Iterator for StateLattice {
    type Item = MaskedSeq;
    fn next(&mut self) -> Option<MaskedSeq> {
        if self.done {
            return None;
        }
        let s = self.current();
        self.advance();
        Some(s)
    }
}

/// Next `k`-subset of `0..n` in lexicographic order; false after the last.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
