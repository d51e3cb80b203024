// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{adam_step, argmax, cross_entropy, gemm, AdamConfig, AdamState, Matrix, Trans};

/// Multinomial logistic regression `softmax(x W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `d × classes`.
    pub w: Matrix,
    /// `1 × classes`.
    pub b: Matrix,
    state_w: AdamState,
    state_b: AdamState,
    adam: AdamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

impl LinearProbe {
    /// Zero-initialized probe.
    pub fn new(d: usize, classes: usize, lr: f64) -> Self {
        Self {
            w: Matrix::zeros(d, classes),
            b: Matrix::zeros(1, classes),
            state_w: AdamState::new(d, classes),
            state_b: AdamState::new(1, classes),
            adam: AdamConfig::with_lr(lr),
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::from_fn(x.rows(), self.w.cols(), |_, j| self.b.get(0, j));
        gemm(1.0, x, Trans::No, &self.w, Trans::No, 1.0, &mut out)?;
        Ok(out)
    }

    /// Mean cross-entropy and its gradients with respect to `w` and `b`.
    pub fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, Matrix)> {
        let (loss, dlogits) = cross_entropy(&self.logits(x)?, labels)?;
        let mut dw = Matrix::zeros(self.w.rows(), self.w.cols());
        gemm(1.0, x, Trans::Yes, &dlogits, Trans::No, 0.0, &mut dw)?;
        let db = Matrix::row_vector(&dlogits.column_sums())?;
        Ok((loss, dw, db))
    }

    /// One Adam step; returns the loss before the step.
    pub fn step(&mut self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let (loss, dw, db) = self.loss_and_grads(x, labels)?;
        adam_step(&mut self.w, &dw, &mut self.state_w, &self.adam, false)?;
        adam_step(&mut self.b, &db, &mut self.state_b, &self.adam, false)?;
        Ok(loss)
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(x)?;
        let hits = logits
            .iter_rows()
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Fits a fresh probe on the training split by full-batch Adam and scores
/// it on both splits.
pub fn linear_probe_fit(
    train_x: &Matrix,
    train_y: &[usize],
    val_x: &Matrix,
    val_y: &[usize],
    classes: usize,
    lr: f64,
    epochs: usize,
) -> Result<ProbeFit> {
    let mut seen = vec![false; classes];
    for &y in train_y {
        *seen.get_mut(y).ok_or_else(|| Error::InvalidArgument(format!("label {y} ≥ {classes}")))? = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidArgument("probe needs at least 2 classes present".into()));
    }
    let mut probe = LinearProbe::new(train_x.cols(), classes, lr);
    for epoch in 0..epochs {
        let loss = probe.step(train_x, train_y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: "linear probe", index: epoch });
        }
    }
    Ok(ProbeFit {
        train_accuracy: probe.accuracy(train_x, train_y)?,
        val_accuracy: probe.accuracy(val_x, val_y)?,
        final_loss: probe.loss_and_grads(train_x, train_y)?.0,
    })
}
