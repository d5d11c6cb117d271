//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`] (ChaCha8), which
//! produces the same stream on every platform. Parallel workers never share a
//! generator; each one derives its own seed from a master seed and its index
//! with [`derive_seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(master, index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw on `[lo, hi)`; returns `lo` when the interval is empty.
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal draw rounded to `f32`, so tensors built from it survive
/// the 32-bit on-disk formats unchanged.
pub fn normal_f32(rng: &mut impl Rng) -> f64 {
    let x: f32 = rng.sample(StandardNormal);
    x as f64
}
