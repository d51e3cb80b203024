// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::numkit::rng;

/// Tokens per example: `[a, op, b, eq]`.
pub const SEQ_LEN: usize = 4;

/// One modular-division example; `label · b ≡ a (mod p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub tokens: [usize; SEQ_LEN],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

pub fn is_prime(p: usize) -> bool {
    p >= 2 && (2..).take_while(|d| d * d <= p).all(|d| p % d != 0)
}

/// `b^(p−2) mod p`, the inverse of a nonzero `b` modulo a prime.
pub fn mod_inverse(b: usize, p: usize) -> usize {
    let (mut base, mut exp, mut acc) = (b as u64 % p as u64, p as u64 - 2, 1u64);
    let m = p as u64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % m;
        }
        base = base * base % m;
        exp >>= 1;
    }
    acc as usize
}

/// Every `(a, b)` with `b ≠ 0`, in `(a, b)` order. The operator token is `p`
/// and the equals token `p + 1`.
pub fn all_examples(p: usize) -> Result<Vec<Example>> {
    if !is_prime(p) {
        return Err(Error::InvalidArgument(format!("modulus {p} is not prime")));
    }
    let mut out = Vec::with_capacity(p * (p - 1));
    for a in 0..p {
        for b in 1..p {
            out.push(Example {
                tokens: [a, p, b, p + 1],
                label: a * mod_inverse(b, p) % p,
            });
        }
    }
    Ok(out)
}

/// Shuffles all examples with `seed` and puts the first
/// `round(train_frac · n)` in the training split.
pub fn build_dataset(p: usize, train_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_frac {train_frac} outside (0, 1)"
        )));
    }
    let mut all = all_examples(p)?;
    let mut r = rng::seeded(seed);
    rng::shuffle(&mut r, &mut all);
    let n_train = ((train_frac * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
    let val = all.split_off(n_train);
    Ok(Split { train: all, val })
}
