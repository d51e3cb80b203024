// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Power per frequency of an embedding table taken along its row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Indexed by frequency `0..=p/2`.
    pub freq_power: Vec<f64>,
    /// Sum of `freq_power` excluding frequency 0.
    pub total_nontrivial: f64,
}

/// `|Σ_t E[t,c] e^{−2πi f t/p}|²` summed over columns, for every `f` in `0..p`.
pub fn dft_power_full(embeddings: &Matrix) -> Result<Vec<f64>> {
    let p = embeddings.rows();
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "DFT needs at least 2 rows, got {p}"
        )));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    // twiddles indexed by (f * t) mod p keep the angle exact
    let (cos_tab, sin_tab): (Vec<f64>, Vec<f64>) = (0..p)
        .map(|r| {
            let a = two_pi * r as f64 / p as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let mut power = vec![0.0; p];
    for (f, pw) in power.iter_mut().enumerate() {
        for c in 0..embeddings.cols() {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..p {
                let r = (f * t) % p;
                let x = embeddings.get(t, c);
                re += x * cos_tab[r];
                im -= x * sin_tab[r];
            }
            *pw += re * re + im * im;
        }
    }
    Ok(power)
}

/// One-sided power spectrum over frequencies `0..=p/2`.
pub fn dft_power(embeddings: &Matrix) -> Result<Spectrum> {
    let full = dft_power_full(embeddings)?;
    let half = embeddings.rows() / 2;
    let freq_power = full[..=half].to_vec();
    let total_nontrivial = freq_power[1..].iter().sum();
    Ok(Spectrum {
        freq_power,
        total_nontrivial,
    })
}
