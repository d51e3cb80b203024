// SPDX-License-Identifier: MIT OR Apache-2.0

use super::Matrix;
use crate::error::{Error, Result};

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / ‖v‖`, or a zero-norm error.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("cannot normalize".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`, clamped into `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row-wise softmax of `m / temperature` with max subtraction.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// `log Σ exp(row)` computed stably.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy of `logits` rows against `labels`, plus the
/// gradient of that mean with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch(format!(
            "cross_entropy: {} rows, {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let n = logits.rows().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        let lse = logsumexp(row);
        loss += lse - row[y];
        for x in row.iter_mut() {
            *x = (*x - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// LayerNorm with population standard deviation and no epsilon:
/// `γ ⊙ (h − mean(h)) / std(h) + β`.
pub fn layernorm(h: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if h.len() != gamma.len() || h.len() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "layernorm: h {}, gamma {}, beta {}",
            h.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if h.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let scale = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    // constant inputs leave rounding-level variance behind
    if var.sqrt() <= 1e-12 * scale.max(f64::MIN_POSITIVE) || var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let std = var.sqrt();
    Ok(h.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(x, (g, b))| g * (x - mean) / std + b)
        .collect())
}

/// Keeps the `k` largest entries of `max(v, 0)` and zeroes the rest.
/// Ties are broken by lowest index.
pub fn topk_select(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let idx = topk_indices(v, k)?;
    let mut out = vec![0.0; v.len()];
    for i in idx {
        out[i] = v[i].max(0.0);
    }
    Ok(out)
}

/// Indices of the `k` entries [`topk_select`] keeps, in descending order of value.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k={k} on a vector of length {}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // clamped values compare equal at zero, so ties among negatives also go
    // to the lowest index
    order.sort_by(|&a, &b| {
        v[b].max(0.0)
            .partial_cmp(&v[a].max(0.0))
            .expect("finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}
