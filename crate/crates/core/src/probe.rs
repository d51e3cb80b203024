// SPDX-License-Identifier: MIT OR Apache-2.0

//! Projection probes: the identity projection, zero-shot class directions,
//! the argmax classification rule, detection, steering and per-head scoring.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{argmax, dot, gemm, norm, Matrix, Trans};
use crate::store::{ActivationBundle, HeadId};

/// Tolerance on the unit norm of direction rows.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zeroshot,
    Unsupervised,
    Sae,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Zeroshot => "zeroshot",
            Method::Unsupervised => "unsupervised",
            Method::Sae => "sae",
        })
    }
}

/// `K × d` unit class directions for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    directions: Matrix,
    pub method: Method,
    pub layer: usize,
    pub head: usize,
}

impl DirectionSet {
    pub fn new(directions: Matrix, method: Method, id: HeadId) -> Result<Self> {
        for (k, row) in directions.iter_rows().enumerate() {
            if (norm(row) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "direction {k} has norm {}",
                    norm(row)
                )));
            }
        }
        Ok(Self {
            directions,
            method,
            layer: id.layer,
            head: id.head,
        })
    }

    /// Normalizes every row of `vectors`.
    pub fn from_unnormalized(vectors: &Matrix, method: Method, id: HeadId) -> Result<Self> {
        let mut m = vectors.clone();
        for k in 0..m.rows() {
            let n = norm(m.row(k));
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("class {k} direction")));
            }
            m.row_mut(k).iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            directions: m,
            method,
            layer: id.layer,
            head: id.head,
        })
    }

    pub fn at(mut self, id: HeadId) -> Self {
        self.layer = id.layer;
        self.head = id.head;
        self
    }

    pub fn head_id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }

    pub fn directions(&self) -> &Matrix {
        &self.directions
    }

    pub fn n_classes(&self) -> usize {
        self.directions.rows()
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    /// `N × K` projections of each row of `queries` on each direction.
    pub fn project_all(&self, queries: &Matrix) -> Result<Matrix> {
        if queries.cols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "queries have {} columns, directions {}",
                queries.cols(),
                self.dim()
            )));
        }
        let mut out = Matrix::zeros(queries.rows(), self.n_classes());
        gemm(1.0, queries, Trans::No, &self.directions, Trans::Yes, 0.0, &mut out)?;
        Ok(out)
    }
}

/// `hᵀd/‖d‖`. The query is not normalized.
pub fn identity_projection(h: &[f64], d: &[f64]) -> Result<f64> {
    if h.len() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} entries, direction {}",
            h.len(),
            d.len()
        )));
    }
    let n = norm(d);
    if n == 0.0 {
        return Err(Error::ZeroNorm("direction".into()));
    }
    Ok(dot(h, d) / n)
}

/// Mean-centered, normalized class tokens.
pub fn zeroshot_directions(class_acts: &Matrix) -> Result<DirectionSet> {
    if class_acts.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "zero-shot directions need at least 2 classes, got {}",
            class_acts.rows()
        )));
    }
    let mean = class_acts.column_means();
    let centered = Matrix::from_fn(class_acts.rows(), class_acts.cols(), |i, j| {
        class_acts.get(i, j) - mean[j]
    });
    DirectionSet::from_unnormalized(&centered, Method::Zeroshot, HeadId::new(0, 0)).map_err(
        |e| match e {
            Error::ZeroNorm(what) => Error::ZeroNorm(format!("centered class token ({what})")),
            other => other,
        },
    )
}

/// `argmax_k hᵀd̂_k`, ties to the lowest class index.
pub fn classify(h: &[f64], ds: &DirectionSet) -> Result<usize> {
    if h.len() != ds.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} entries, directions {}",
            h.len(),
            ds.dim()
        )));
    }
    let scores: Vec<f64> = ds.directions.iter_rows().map(|d| dot(h, d)).collect();
    Ok(argmax(&scores))
}

/// Predicted class of every row of `queries`.
pub fn classify_all(queries: &Matrix, ds: &DirectionSet) -> Result<Vec<usize>> {
    let scores = ds.project_all(queries)?;
    Ok(scores.iter_rows().map(argmax).collect())
}

/// Whether `identity_projection(h, d)` exceeds `tau`.
pub fn detect(h: &[f64], d: &[f64], tau: f64) -> Result<bool> {
    Ok(identity_projection(h, d)? > tau)
}

/// Midpoint between class `k`'s token projection on `d` and the mean
/// projection of the other class tokens.
pub fn default_threshold(class_acts: &Matrix, k: usize, d: &[f64]) -> Result<f64> {
    let n = class_acts.rows();
    if k >= n || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "class {k} of {n} has no other classes to compare"
        )));
    }
    let own = identity_projection(class_acts.row(k), d)?;
    let mut others = 0.0;
    for j in (0..n).filter(|&j| j != k) {
        others += identity_projection(class_acts.row(j), d)?;
    }
    Ok(0.5 * (own + others / (n - 1) as f64))
}

/// Logit change of token `t` when `λ·d_f` is added to the hidden state.
pub fn steering_delta(w_t: &[f64], d_f: &[f64], lambda: f64) -> Result<f64> {
    if w_t.len() != d_f.len() {
        return Err(Error::DimensionMismatch(format!(
            "unembedding row has {} entries, direction {}",
            w_t.len(),
            d_f.len()
        )));
    }
    Ok(lambda * dot(w_t, d_f))
}

/// Direct logit differences `W_U(h + λ·d_f) − W_U h` for every vocabulary row.
pub fn logit_shift(unembed: &Matrix, h: &[f64], d_f: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if h.len() != d_f.len() {
        return Err(Error::DimensionMismatch("hidden state and direction differ".into()));
    }
    let steered: Vec<f64> = h.iter().zip(d_f).map(|(x, d)| x + lambda * d).collect();
    let before = unembed.matvec(h)?;
    let after = unembed.matvec(&steered)?;
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// Accuracy of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub method: Method,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_eval: usize,
    /// Per class; `None` for classes without instances.
    pub per_class_accuracy: Vec<Option<f64>>,
}

impl HeadScore {
    pub fn from_predictions(
        id: HeadId,
        method: Method,
        predictions: &[usize],
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut seen = vec![0usize; n_classes];
        let mut hit = vec![0usize; n_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l >= n_classes {
                return Err(Error::InvalidArgument(format!("label {l} ≥ {n_classes}")));
            }
            seen[l] += 1;
            hit[l] += usize::from(p == l);
        }
        let n_correct: usize = hit.iter().sum();
        let n_eval = labels.len();
        Ok(Self {
            layer: id.layer,
            head: id.head,
            method,
            accuracy: if n_eval == 0 { 0.0 } else { n_correct as f64 / n_eval as f64 },
            n_correct,
            n_eval,
            per_class_accuracy: seen
                .iter()
                .zip(&hit)
                .map(|(&s, &h)| (s > 0).then(|| h as f64 / s as f64))
                .collect(),
        })
    }

    pub fn head_id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }

    /// Mean of the defined per-class accuracies.
    pub fn macro_accuracy(&self) -> f64 {
        let defined: Vec<f64> = self.per_class_accuracy.iter().flatten().copied().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }
}

/// Row-wise map applied to queries before projection.
pub trait FeatureMap: Send + Sync {
    fn apply(&self, rows: &Matrix) -> Result<Matrix>;
}

/// The identity map used by the zero-shot probe.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl FeatureMap for Identity {
    fn apply(&self, rows: &Matrix) -> Result<Matrix> {
        Ok(rows.clone())
    }
}

/// A probe fitted to one head: a feature map and directions in its space.
pub struct FittedHead {
    pub directions: DirectionSet,
    pub feature_map: Box<dyn FeatureMap>,
}

impl FittedHead {
    pub fn zeroshot(id: HeadId, class_acts: &Matrix) -> Result<Self> {
        Ok(Self {
            directions: zeroshot_directions(class_acts)?.at(id),
            feature_map: Box::new(Identity),
        })
    }

    pub fn predict(&self, instances: &Matrix) -> Result<Vec<usize>> {
        classify_all(&self.feature_map.apply(instances)?, &self.directions)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Subtract the mean instance activation before the feature map.
    pub center_instances: bool,
}

fn center_rows(m: &Matrix) -> Matrix {
    let mean = m.column_means();
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) - mean[j])
}

/// Fits and scores every head in parallel. Scores come back sorted by
/// accuracy (highest first), ties in `(layer, head)` order.
pub fn per_head_accuracy<F>(
    bundle: &ActivationBundle,
    method: Method,
    opts: EvalOptions,
    fit: F,
) -> Result<Vec<HeadScore>>
where
    F: Fn(HeadId, &Matrix, &Matrix) -> Result<FittedHead> + Sync,
{
    let labels = bundle.labels();
    let n_classes = bundle.n_classes();
    let mut scores = bundle
        .head_ids()
        .par_iter()
        .map(|&id| {
            let class_acts = bundle.class_acts(id)?;
            let inst = bundle.instance_acts(id)?;
            let fitted = fit(id, class_acts, inst)?;
            let queries = if opts.center_instances {
                center_rows(inst)
            } else {
                inst.clone()
            };
            let pred = fitted.predict(&queries)?;
            HeadScore::from_predictions(id, method, &pred, &labels, n_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_scores(&mut scores);
    Ok(scores)
}

/// Zero-shot scores of every head.
pub fn zeroshot_scores(bundle: &ActivationBundle, opts: EvalOptions) -> Result<Vec<HeadScore>> {
    per_head_accuracy(bundle, Method::Zeroshot, opts, |id, c, _| FittedHead::zeroshot(id, c))
}

pub fn sort_scores(scores: &mut [HeadScore]) {
    scores.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
}

/// CSV with columns `layer,head,accuracy,class_0,…`; undefined per-class
/// entries are empty.
pub fn scores_csv(scores: &[HeadScore]) -> String {
    let k = scores.first().map_or(0, |s| s.per_class_accuracy.len());
    let mut out = String::from("layer,head,accuracy");
    for c in 0..k {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for s in scores {
        out.push_str(&format!("{},{},{}", s.layer, s.head, s.accuracy));
        for a in &s.per_class_accuracy {
            out.push(',');
            if let Some(a) = a {
                out.push_str(&a.to_string());
            }
        }
        out.push('\n');
    }
    out
}
