//! Unmasking-order policies for masked diffusion samplers.
//!
//! A masked diffusion sampler fills a fully masked sequence one position at a
//! time. The frozen denoiser supplies a token posterior for every masked
//! position; an *unmasking policy* decides which position to reveal next. This
//! crate provides:
//!
//! - [`seq`]: masked sequences and the enumerable state lattice,
//! - [`tasks`]: toy task families with exact answer distributions and rewards,
//! - [`denoiser`]: exact and corrupted token posteriors,
//! - [`unmask`]: heuristic schedulers, the transition kernel and rollouts,
//! - [`policy`]: a small learnable scorer and its softmax policy,
//! - [`upo`]: group-relative clipped policy optimization with divergence terms,
//! - [`oracle`]: exact dynamic programs over the state lattice.
//!
//! Positions are 0-based throughout. The crate is `no_std` and needs `alloc`.
#![no_std]
#![forbid(unsafe_code)]
// `!(x >= 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod denoiser;
mod error;
pub mod oracle;
pub mod policy;
pub mod seq;
pub mod tasks;
pub mod unmask;
pub mod upo;

pub use error::{Error, Result};

/// Seed for the `index`-th child stream of `seed` (one SplitMix64 round).
///
/// Nested derivations such as `derive_seed(derive_seed(s, i), j)` do not
/// collide for swapped `(i, j)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator used for every stream the crate creates itself.
pub type StreamRng = rand_chacha::ChaCha8Rng;

/// Fresh [`StreamRng`] for `derive_seed(seed, index)`.
pub fn stream_rng(seed: u64, index: u64) -> StreamRng {
    use rand::SeedableRng;
    StreamRng::seed_from_u64(derive_seed(seed, index))
}
