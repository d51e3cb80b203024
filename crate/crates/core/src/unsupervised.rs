// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive transform trained on class tokens alone.
//!
//! A square `W` is fitted so that each transformed token `W h_k` scores
//! highest against its own prototype `c_k` under a temperature-scaled
//! softmax. Classification then uses the transformed instances and the
//! normalized transformed tokens as directions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::rng::{self, derive_seed};
use crate::numkit::{adam_step, gemm, softmax_rows, AdamConfig, AdamState, Matrix, Trans};
use crate::probe::{
    per_head_accuracy, zeroshot_directions, DirectionSet, EvalOptions, FeatureMap, FittedHead,
    HeadScore, Method,
};
use crate::store::{read_actbin, read_json, write_actbin, write_json, ActivationBundle, HeadId};

/// Standard deviation of the noise added to the identity at initialization.
pub const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Centered, normalized raw class tokens, fixed for the whole run.
    #[default]
    Frozen,
    /// Normalized `W h_k`, refreshed before every step and treated as constant.
    Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub prototypes: PrototypeMode,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lr: 1e-3,
            epochs: 500,
            seed: 0,
            prototypes: PrototypeMode::Frozen,
        }
    }
}

/// A trained contrastive transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `d × d`.
    pub w: Matrix,
    /// `K × d` unit rows.
    pub prototypes: Matrix,
    pub config: ProbeTrainConfig,
    /// Loss before every update, then the final loss (`epochs + 1` entries).
    pub train_log: Vec<f64>,
}

/// `W h` for every row of `rows`.
fn apply_w(w: &Matrix, rows: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(rows.rows(), w.rows());
    gemm(1.0, rows, Trans::No, w, Trans::Yes, 0.0, &mut out)?;
    Ok(out)
}

/// Loss and its gradient with respect to `w`.
///
/// With `Z = H Wᵀ`, `S = Z Cᵀ / τ` and `P = softmax(S)` row-wise, the loss is
/// `−Σ_k log P_kk` and the gradient is `(1/τ) Cᵀ (P − I)ᵀ H`.
pub fn contrastive_loss_and_grad(
    w: &Matrix,
    prototypes: &Matrix,
    class_acts: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    let k = class_acts.rows();
    if k < 2 || prototypes.rows() != k {
        return Err(Error::InvalidArgument(format!(
            "need ≥ 2 anchors with one prototype each ({k} anchors, {} prototypes)",
            prototypes.rows()
        )));
    }
    if w.rows() != prototypes.cols() || w.cols() != class_acts.cols() {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?}, tokens {:?}, prototypes {:?}",
            w.shape(),
            class_acts.shape(),
            prototypes.shape()
        )));
    }
    let z = apply_w(w, class_acts)?;
    let mut s = Matrix::zeros(k, k);
    gemm(1.0, &z, Trans::No, prototypes, Trans::Yes, 0.0, &mut s)?;
    // log-softmax with max subtraction at temperature τ
    let p = softmax_rows(&s, temperature)?;
    let mut loss = 0.0;
    for a in 0..k {
        let row: Vec<f64> = s.row(a).iter().map(|x| x / temperature).collect();
        loss -= row[a] - crate::numkit::logsumexp(&row);
    }
    let mut p_minus_i = p;
    for a in 0..k {
        let v = p_minus_i.get(a, a) - 1.0;
        p_minus_i.set(a, a, v);
    }
    // dZ = (P − I) C / τ, dW = dZᵀ H
    let mut dz = Matrix::zeros(k, prototypes.cols());
    gemm(1.0 / temperature, &p_minus_i, Trans::No, prototypes, Trans::No, 0.0, &mut dz)?;
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    gemm(1.0, &dz, Trans::Yes, class_acts, Trans::No, 0.0, &mut grad)?;
    Ok((loss, grad))
}

/// Loss of `model` on `class_acts`.
pub fn contrastive_loss(model: &ProbeModel, class_acts: &Matrix) -> Result<f64> {
    contrastive_loss_and_grad(&model.w, &model.prototypes, class_acts, model.config.temperature)
        .map(|(l, _)| l)
}

fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    Ok(DirectionSet::from_unnormalized(m, Method::Unsupervised, HeadId::new(0, 0))?
        .directions()
        .clone())
}

/// Full-batch Adam on the contrastive loss.
pub fn train_probe(class_acts: &Matrix, cfg: &ProbeTrainConfig) -> Result<ProbeModel> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let d = class_acts.cols();
    let mut prototypes = zeroshot_directions(class_acts)?.directions().clone();
    let mut rng = rng::seeded(cfg.seed);
    let mut w = rng::gaussian_matrix(&mut rng, d, d, INIT_NOISE);
    for i in 0..d {
        w.set(i, i, w.get(i, i) + 1.0);
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::for_params(&w);
    let mut train_log = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        if cfg.prototypes == PrototypeMode::Tracking {
            prototypes = normalized_rows(&apply_w(&w, class_acts)?)?;
        }
        let (loss, grad) = contrastive_loss_and_grad(&w, &prototypes, class_acts, cfg.temperature)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "contrastive probe",
                index: epoch,
            });
        }
        train_log.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        adam_step(&mut w, &grad, &mut state, &adam, false)?;
    }
    log::debug!(
        "contrastive probe: loss {:.4} -> {:.4} over {} epochs",
        train_log[0],
        train_log[cfg.epochs],
        cfg.epochs
    );
    Ok(ProbeModel {
        w,
        prototypes,
        config: *cfg,
        train_log,
    })
}

/// `W h`.
pub fn transform(model: &ProbeModel, h: &[f64]) -> Result<Vec<f64>> {
    model.w.matvec(h)
}

/// Linear feature map `h ↦ W h`.
#[derive(Debug, Clone)]
pub struct LinearMap(pub Matrix);

impl FeatureMap for LinearMap {
    fn apply(&self, rows: &Matrix) -> Result<Matrix> {
        apply_w(&self.0, rows)
    }
}

impl ProbeModel {
    /// Normalized `W h_k` as class directions, with `W` as the feature map.
    pub fn fitted_head(&self, id: HeadId, class_acts: &Matrix) -> Result<FittedHead> {
        let transformed = apply_w(&self.w, class_acts)?;
        Ok(FittedHead {
            directions: DirectionSet::from_unnormalized(&transformed, Method::Unsupervised, id)?,
            feature_map: Box::new(LinearMap(self.w.clone())),
        })
    }

    /// Gram matrix of the normalized transformed class tokens.
    pub fn token_gram(&self, class_acts: &Matrix) -> Result<Matrix> {
        let u = normalized_rows(&apply_w(&self.w, class_acts)?)?;
        let mut g = Matrix::zeros(u.rows(), u.rows());
        gemm(1.0, &u, Trans::No, &u, Trans::Yes, 0.0, &mut g)?;
        Ok(g)
    }

    /// Writes `{stem}_W.actbin`, `{stem}_prototypes.actbin` and `{stem}.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        write_actbin(&self.w, dir.join(format!("{stem}_W.actbin")))?;
        write_actbin(&self.prototypes, dir.join(format!("{stem}_prototypes.actbin")))?;
        write_json(
            &ProbeSidecar {
                temperature: self.config.temperature,
                lr: self.config.lr,
                epochs: self.config.epochs,
                seed: self.config.seed,
                prototypes: self.config.prototypes,
                loss_log: self.train_log.clone(),
            },
            dir.join(format!("{stem}.json")),
        )?;
        Ok(vec![
            format!("{stem}_W.actbin"),
            format!("{stem}_prototypes.actbin"),
            format!("{stem}.json"),
        ])
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let side: ProbeSidecar = read_json(dir.join(format!("{stem}.json")))?;
        Ok(Self {
            w: read_actbin(dir.join(format!("{stem}_W.actbin")))?,
            prototypes: read_actbin(dir.join(format!("{stem}_prototypes.actbin")))?,
            config: ProbeTrainConfig {
                temperature: side.temperature,
                lr: side.lr,
                epochs: side.epochs,
                seed: side.seed,
                prototypes: side.prototypes,
            },
            train_log: side.loss_log,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeSidecar {
    temperature: f64,
    lr: f64,
    epochs: usize,
    seed: u64,
    prototypes: PrototypeMode,
    loss_log: Vec<f64>,
}

/// Seed used for one head's run.
pub fn head_seed(seed: u64, id: HeadId) -> u64 {
    derive_seed(seed, ((id.layer as u64) << 32) | id.head as u64)
}

/// Trains one probe per head (in parallel) and scores it.
pub fn unsupervised_scores(
    bundle: &ActivationBundle,
    cfg: &ProbeTrainConfig,
    opts: EvalOptions,
) -> Result<(Vec<HeadScore>, BTreeMap<HeadId, ProbeModel>)> {
    let models: BTreeMap<HeadId, ProbeModel> = bundle
        .head_ids()
        .par_iter()
        .map(|&id| {
            let head_cfg = ProbeTrainConfig {
                seed: head_seed(cfg.seed, id),
                ..*cfg
            };
            Ok((id, train_probe(bundle.class_acts(id)?, &head_cfg)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    let scores = per_head_accuracy(bundle, Method::Unsupervised, opts, |id, c, _| {
        models[&id].fitted_head(id, c)
    })?;
    Ok((scores, models))
}
