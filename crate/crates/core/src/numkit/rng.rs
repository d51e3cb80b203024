// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! Every stochastic routine draws from a ChaCha8 stream created by
//! [`seeded`], with Gaussian samples from `rand_distr::StandardNormal`.
//! Sub-streams for independent workers (heads, seeds) come from
//! [`derive_seed`], so parallel and sequential runs draw identical numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `seed` with a stream label (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

pub fn gaussian_matrix(rng: &mut Prng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * gaussian(rng))
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.random_range(lo..hi)
}

/// Fisher–Yates shuffle.
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
