// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::numkit::{dft_power, Matrix};

/// Number of leading frequencies counted as concentrated power.
pub const TOP_FREQUENCIES: usize = 5;

/// Share of nontrivial spectral power (along the token axis) held by the
/// `TOP_FREQUENCIES` strongest frequencies; 0 when there is none.
///
/// Nontrivial power below `1e-20` of the total counts as none, which absorbs
/// rounding in the transform of a constant table.
pub fn fourier_concentration(embeddings: &Matrix) -> Result<f64> {
    if embeddings.rows() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 rows, got {}",
            embeddings.rows()
        )));
    }
    let spectrum = dft_power(embeddings)?;
    let total = spectrum.freq_power[0] + spectrum.total_nontrivial;
    if spectrum.total_nontrivial <= 1e-20 * total {
        return Ok(0.0);
    }
    let mut nontrivial = spectrum.freq_power[1..].to_vec();
    nontrivial.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = nontrivial.iter().take(TOP_FREQUENCIES).sum();
    Ok((top / spectrum.total_nontrivial).clamp(0.0, 1.0))
}
