// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token/instance alignment per head: cosine between each class token and
//! its class's mean instance, against the cosine to other classes' means.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::rng;
use crate::numkit::{cosine, Matrix};
use crate::store::{ActivationBundle, HeadId};

/// Aggregation recorded alongside alignment output.
pub const AGGREGATION: &str =
    "within: mean over classes k of cos(token_k, mean_k); between: mean over ordered pairs k != j of cos(token_k, mean_j); raw activations";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub layer: usize,
    pub head: usize,
    pub within: f64,
    pub between: f64,
}

impl AlignmentPoint {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }

    pub fn above_diagonal(&self) -> bool {
        self.within > self.between
    }
}

/// Per-class mean of `instances` under `labels`.
pub fn class_means_of(instances: &Matrix, labels: &[usize], n_classes: usize) -> Result<Matrix> {
    if labels.len() != instances.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} instances",
            labels.len(),
            instances.rows()
        )));
    }
    let mut sums = Matrix::zeros(n_classes, instances.cols());
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in instances.iter_rows().zip(labels) {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("label {l} ≥ {n_classes}")));
        }
        counts[l] += 1;
        sums.row_mut(l).iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    for (class, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyClass { class });
        }
        sums.row_mut(class).iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(sums)
}

pub fn class_means(bundle: &ActivationBundle, id: HeadId) -> Result<Matrix> {
    class_means_of(bundle.instance_acts(id)?, &bundle.labels(), bundle.n_classes())
}

/// `(within, between)` for class tokens against class means.
pub fn within_between_of(tokens: &Matrix, means: &Matrix) -> Result<(f64, f64)> {
    let k = tokens.rows();
    if k < 2 || means.rows() != k {
        return Err(Error::InvalidArgument(format!(
            "need ≥ 2 classes with one mean each ({k} tokens, {} means)",
            means.rows()
        )));
    }
    let mut within = 0.0;
    let mut between = 0.0;
    for a in 0..k {
        for b in 0..k {
            let c = cosine(tokens.row(a), means.row(b))?;
            if a == b {
                within += c;
            } else {
                between += c;
            }
        }
    }
    Ok((within / k as f64, between / (k * (k - 1)) as f64))
}

pub fn within_between(bundle: &ActivationBundle, id: HeadId) -> Result<AlignmentPoint> {
    let (within, between) = within_between_of(bundle.class_acts(id)?, &class_means(bundle, id)?)?;
    Ok(AlignmentPoint {
        layer: id.layer,
        head: id.head,
        within,
        between,
    })
}

/// One point per head, in head order.
pub fn alignment_points(bundle: &ActivationBundle) -> Result<Vec<AlignmentPoint>> {
    bundle
        .head_ids()
        .par_iter()
        .map(|&id| within_between(bundle, id))
        .collect()
}

/// Fraction of points strictly above the diagonal.
pub fn heads_above_diagonal(points: &[AlignmentPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no alignment points".into()));
    }
    let above = points.iter().filter(|p| p.above_diagonal()).count();
    Ok(above as f64 / points.len() as f64)
}

/// Observed within−between gap against gaps under shuffled labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub observed_gap: f64,
    pub null_mean: f64,
    pub null_std: f64,
    /// `(observed − null_mean) / null_std`.
    pub z_score: f64,
    /// Two-sided, with the usual `+1` correction.
    pub p_value: f64,
    pub permutations: usize,
}

pub fn gap_permutation_test(
    tokens: &Matrix,
    instances: &Matrix,
    labels: &[usize],
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if permutations < 2 {
        return Err(Error::InvalidArgument("need at least 2 permutations".into()));
    }
    let k = tokens.rows();
    let gap = |labels: &[usize]| -> Result<f64> {
        let (w, b) = within_between_of(tokens, &class_means_of(instances, labels, k)?)?;
        Ok(w - b)
    };
    let observed_gap = gap(labels)?;
    let mut r = rng::seeded(seed);
    let mut shuffled = labels.to_vec();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        rng::shuffle(&mut r, &mut shuffled);
        // a shuffle can empty a class only if it was already empty
        null.push(gap(&shuffled)?);
    }
    let n = permutations as f64;
    let null_mean = null.iter().sum::<f64>() / n;
    let null_std = (null.iter().map(|g| (g - null_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let extreme = null
        .iter()
        .filter(|g| (*g - null_mean).abs() >= (observed_gap - null_mean).abs())
        .count();
    Ok(PermutationTest {
        observed_gap,
        null_mean,
        null_std,
        z_score: if null_std > 0.0 {
            (observed_gap - null_mean) / null_std
        } else {
            0.0
        },
        p_value: (extreme + 1) as f64 / (n + 1.0),
        permutations,
    })
}

/// CSV `layer,head,within,between,gap`.
pub fn points_csv(points: &[AlignmentPoint]) -> String {
    let mut out = String::from("layer,head,within,between,gap\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{}\n", p.layer, p.head, p.within, p.between, p.gap()));
    }
    out
}

/// Whitespace-separated `between within` pairs for plotting.
pub fn scatter_data(points: &[AlignmentPoint]) -> String {
    let mut out = String::from("# x=between y=within layer head\n");
    for p in points {
        out.push_str(&format!("{} {} {} {}\n", p.between, p.within, p.layer, p.head));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn point(within: f64, between: f64) -> AlignmentPoint {
        AlignmentPoint { layer: 0, head: 0, within, between }
    }

    #[test]
    fn means_and_empty_class() {
        let inst = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![0.0, 5.0]]).unwrap();
        let m = class_means_of(&inst, &[0, 0, 1], 2).unwrap();
        assert_eq!(m.row(0), &[2.0, 1.0]);
        assert_eq!(m.row(1), &[0.0, 5.0]);
        assert!(matches!(class_means_of(&inst, &[0, 0, 0], 2), Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn orthogonal_classes() {
        let tokens = Matrix::identity(3);
        let (w, b) = within_between_of(&tokens, &tokens).unwrap();
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ordered_pair_average() {
        // cos(t0, m1) = 1, cos(t1, m0) = 0
        let tokens = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let means = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (w, b) = within_between_of(&tokens, &means).unwrap();
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_fraction_and_ties() {
        let pts = [point(0.9, 0.1), point(0.1, 0.9), point(0.4, 0.3), point(0.3, 0.4)];
        assert_eq!(heads_above_diagonal(&pts).unwrap(), 0.5);
        assert_eq!(heads_above_diagonal(&[point(0.5, 0.5)]).unwrap(), 0.0);
        assert!(heads_above_diagonal(&[]).is_err());
    }

    #[test]
    fn csv_and_scatter() {
        let p = AlignmentPoint { layer: 2, head: 1, within: 0.5, between: 0.25 };
        assert_eq!(points_csv(&[p]), "layer,head,within,between,gap\n2,1,0.5,0.25,0.25\n");
        assert!(scatter_data(&[p]).ends_with("0.25 0.5 2 1\n"));
    }

    #[test]
    fn zero_vector_is_error() {
        let tokens = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(within_between_of(&tokens, &Matrix::identity(2)).is_err());
    }
}
