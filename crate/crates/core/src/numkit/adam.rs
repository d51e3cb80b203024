// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Adam / AdamW hyperparameters. `weight_decay` is decoupled (AdamW) and
/// applied only where the caller asks for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_params(params: &Matrix) -> Self {
        Self::new(params.rows(), params.cols())
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `decay` selects whether the decoupled weight decay of `cfg` applies to
/// this parameter (it is skipped for biases and norm gains).
pub fn adam_step(
    params: &mut Matrix,
    grads: &Matrix,
    state: &mut AdamState,
    cfg: &AdamConfig,
    decay: bool,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.m.shape() {
        return Err(Error::DimensionMismatch(format!(
            "adam: params {:?}, grads {:?}, state {:?}",
            params.shape(),
            grads.shape(),
            state.m.shape()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        if wd != 0.0 {
            *p -= cfg.lr * wd * *p;
        }
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = Matrix::new(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::for_params(&p);
        for _ in 0..5 {
            adam_step(&mut p, &Matrix::zeros(1, 3), &mut s, &AdamConfig::default(), false).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Matrix::new(1, 1, vec![0.5]).unwrap();
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &Matrix::new(1, 1, vec![1.0]).unwrap(), &mut s, &cfg, false).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let want = 0.5 - 0.1 * 1.0 / (1.0 + cfg.eps);
        assert!((p.get(0, 0) - want).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = AdamState::for_params(&p);
        assert!(adam_step(&mut p, &Matrix::zeros(1, 2), &mut s, &AdamConfig::default(), false).is_err());
    }

    #[test]
    fn identical_runs_bit_identical() {
        let run = || {
            let mut p = Matrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.3);
            let mut s = AdamState::for_params(&p);
            let cfg = AdamConfig {
                weight_decay: 0.1,
                ..AdamConfig::default()
            };
            for step in 0..50 {
                let g = Matrix::from_fn(3, 3, |i, j| p.get(i, j) * 2.0 + step as f64 * 1e-3);
                adam_step(&mut p, &g, &mut s, &cfg, true).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
