// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal components by power iteration with deflation.

use super::ops::{dot, norm};
use super::Matrix;
use crate::error::{Error, Result};

pub const PCA_TOLERANCE: f64 = 1e-8;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

/// Result of [`pca_project`].
#[derive(Debug, Clone)]
pub struct Pca {
    /// `dims × cols`, orthonormal rows in order of decreasing variance.
    pub components: Matrix,
    /// Variance captured by each component (sample covariance, `n − 1`).
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    /// Column means removed before projecting.
    pub mean: Vec<f64>,
    /// `rows × dims` coordinates of the centered data.
    pub projection: Matrix,
}

impl Pca {
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 0.0;
        }
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }
}

/// Sample covariance `Xcᵀ Xc / (n − 1)` of the column-centered data.
pub fn covariance(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = m.column_means();
    let d = m.cols();
    let mut cov = Matrix::zeros(d, d);
    for row in m.iter_rows() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..d {
            let ci = c[i];
            let out = cov.row_mut(i);
            for (o, cj) in out.iter_mut().zip(&c) {
                *o += ci * cj;
            }
        }
    }
    cov.scale(1.0 / (m.rows().saturating_sub(1).max(1)) as f64);
    (cov, mean)
}

/// Projects the rows of `m` onto its top `dims` principal components.
pub fn pca_project(m: &Matrix, dims: usize) -> Result<Pca> {
    if m.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 rows, got {}",
            m.rows()
        )));
    }
    if dims > m.cols() {
        return Err(Error::InvalidArgument(format!(
            "cannot take {dims} components of {}-column data",
            m.cols()
        )));
    }
    let (mut cov, mean) = covariance(m);
    let d = m.cols();
    let total_variance: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let scale = total_variance.max(f64::MIN_POSITIVE);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for _ in 0..dims {
        let (v, lambda) = leading_eigenpair(&cov, &components, scale)?;
        for i in 0..d {
            for j in 0..d {
                let x = cov.get(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, x);
            }
        }
        explained.push(lambda.max(0.0));
        components.push(v);
    }

    let components = Matrix::from_rows(&components)
        .unwrap_or_else(|_| Matrix::zeros(0, d));
    let projection = Matrix::from_fn(m.rows(), dims, |i, k| {
        m.row(i)
            .iter()
            .zip(&mean)
            .zip(components.row(k))
            .map(|((x, mu), c)| (x - mu) * c)
            .sum()
    });
    Ok(Pca {
        components,
        explained_variance: explained,
        total_variance,
        mean,
        projection,
    })
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
    }
}

fn leading_eigenpair(cov: &Matrix, found: &[Vec<f64>], scale: f64) -> Result<(Vec<f64>, f64)> {
    let d = cov.cols();
    // start from the heaviest column: it has weight in the dominant eigenspace
    let mut best = (0, -1.0);
    for j in 0..d {
        let n = norm(&cov.column(j));
        if n > best.1 {
            best = (j, n);
        }
    }
    let mut v = cov.column(best.0);
    orthogonalize(&mut v, found);
    if norm(&v) <= 1e-14 * scale {
        // remaining variance is nil: any unit vector orthogonal to `found` will do
        v = fallback_direction(d, found);
        return Ok((v, 0.0));
    }
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    for _ in 0..PCA_MAX_ITERATIONS {
        let mut w = cov.matvec(&v)?;
        orthogonalize(&mut w, found);
        let lambda = dot(&v, &w);
        let residual: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= PCA_TOLERANCE * scale {
            return Ok((v, lambda));
        }
        let wn = norm(&w);
        if wn <= 1e-14 * scale {
            return Ok((v, 0.0));
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
    }
    Err(Error::NonConvergence {
        iterations: PCA_MAX_ITERATIONS,
    })
}

fn fallback_direction(d: usize, found: &[Vec<f64>]) -> Vec<f64> {
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        orthogonalize(&mut e, found);
        let n = norm(&e);
        if n > 1e-6 {
            e.iter_mut().for_each(|x| *x /= n);
            return e;
        }
    }
    vec![0.0; d]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn line_in_3d_is_rank_one() {
        let dir = [1.0, 2.0, -0.5];
        let m = Matrix::from_fn(20, 3, |i, j| (i as f64 - 7.0) * dir[j] + 0.3);
        let pca = pca_project(&m, 2).unwrap();
        assert!(pca.explained_variance[0] / pca.total_variance >= 0.999);
        let c0 = pca.components.row(0);
        let c1 = pca.components.row(1);
        assert_abs_diff_eq!(dot(c0, c0), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dot(c1, c1), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dot(c0, c1), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn circle_survives_projection() {
        let p = 13;
        let m = Matrix::from_fn(p, 6, |t, j| {
            let theta = 2.0 * std::f64::consts::PI * t as f64 / p as f64;
            match j {
                0 => theta.cos(),
                1 => theta.sin(),
                _ => 0.0,
            }
        });
        let pca = pca_project(&m, 2).unwrap();
        let radii: Vec<f64> = pca.projection.iter_rows().map(norm).collect();
        for r in &radii {
            assert_abs_diff_eq!(*r, radii[0], epsilon = 1e-4);
        }
    }

    #[test]
    fn preconditions() {
        assert!(pca_project(&Matrix::zeros(1, 3), 1).is_err());
        assert!(pca_project(&Matrix::zeros(4, 3), 4).is_err());
    }
}
