// SPDX-License-Identifier: MIT OR Apache-2.0

//! TopK sparse autoencoders, one per head, trained on instance activations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::rng::{self, Prng};
use crate::numkit::{adam_step, cosine, gemm, norm, topk_select, AdamConfig, AdamState, Matrix, Trans};
use crate::probe::{
    per_head_accuracy, DirectionSet, EvalOptions, FeatureMap, FittedHead, HeadScore, Method,
};
use crate::store::{read_actbin, read_json, write_actbin, write_json, ActivationBundle, HeadId};
use crate::unsupervised::head_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    /// Latent count; `None` means four times the input dimension.
    pub m: Option<usize>,
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; `None` trains full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            m: None,
            k: 32,
            lr: 1e-3,
            epochs: 200,
            batch_size: None,
            seed: 0,
        }
    }
}

impl SaeConfig {
    pub fn latents(&self, d: usize) -> usize {
        self.m.unwrap_or(4 * d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// `m × d`.
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    /// `m × d`, unit rows.
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
    pub k: usize,
    pub config: SaeConfig,
    /// Mean reconstruction loss per epoch, then the final loss.
    pub train_log: Vec<f64>,
    /// Latents never active on the training data after the last update.
    pub dead_latents: Vec<usize>,
}

/// Gradients of the mean reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Matrix,
    pub b_enc: Matrix,
    pub w_dec: Matrix,
    pub b_dec: Matrix,
}

fn row_matrix(v: &[f64]) -> Result<Matrix> {
    Matrix::row_vector(v)
}

impl SaeModel {
    pub fn m(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d(&self) -> usize {
        self.w_enc.cols()
    }

    fn check_dim(&self, len: usize, want: usize, what: &str) -> Result<()> {
        if len == want {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!("{what} has {len} entries, expected {want}")))
        }
    }

    /// `W_enc h + b_enc` for every row.
    pub fn preactivations(&self, rows: &Matrix) -> Result<Matrix> {
        self.check_dim(rows.cols(), self.d(), "input row")?;
        let mut pre = Matrix::from_fn(rows.rows(), self.m(), |_, j| self.b_enc[j]);
        gemm(1.0, rows, Trans::No, &self.w_enc, Trans::Yes, 1.0, &mut pre)?;
        Ok(pre)
    }

    /// TopK latents of every row.
    pub fn encode_rows(&self, rows: &Matrix) -> Result<Matrix> {
        let mut z = self.preactivations(rows)?;
        for i in 0..z.rows() {
            let sel = topk_select(z.row(i), self.k)?;
            z.row_mut(i).copy_from_slice(&sel);
        }
        Ok(z)
    }

    /// `z W_dec + b_dec` for every row.
    pub fn decode_rows(&self, z: &Matrix) -> Result<Matrix> {
        self.check_dim(z.cols(), self.m(), "latent row")?;
        let mut out = Matrix::from_fn(z.rows(), self.d(), |_, j| self.b_dec[j]);
        gemm(1.0, z, Trans::No, &self.w_dec, Trans::No, 1.0, &mut out)?;
        Ok(out)
    }

    /// Mean squared reconstruction error over rows.
    pub fn reconstruction_loss(&self, rows: &Matrix) -> Result<f64> {
        let recon = self.decode_rows(&self.encode_rows(rows)?)?;
        Ok(mean_sq_diff(&recon, rows))
    }

    pub fn fitted_head(&self, id: HeadId, class_acts: &Matrix) -> Result<FittedHead> {
        let z = self.encode_rows(class_acts)?;
        let directions = DirectionSet::from_unnormalized(&z, Method::Sae, id).map_err(|e| match e {
            Error::ZeroNorm(what) => Error::ZeroNorm(format!("encoded class token ({what})")),
            other => other,
        })?;
        Ok(FittedHead {
            directions,
            feature_map: Box::new(self.clone()),
        })
    }

    /// Writes `{stem}_W_enc`, `{stem}_b_enc`, `{stem}_W_dec`, `{stem}_b_dec`
    /// (`.actbin`) and `{stem}.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        write_actbin(&self.w_enc, dir.join(format!("{stem}_W_enc.actbin")))?;
        write_actbin(&row_matrix(&self.b_enc)?, dir.join(format!("{stem}_b_enc.actbin")))?;
        write_actbin(&self.w_dec, dir.join(format!("{stem}_W_dec.actbin")))?;
        write_actbin(&row_matrix(&self.b_dec)?, dir.join(format!("{stem}_b_dec.actbin")))?;
        write_json(
            &SaeSidecar {
                m: self.m(),
                k: self.k,
                config: self.config,
                loss_log: self.train_log.clone(),
                dead_latents: self.dead_latents.clone(),
            },
            dir.join(format!("{stem}.json")),
        )?;
        Ok(["_W_enc.actbin", "_b_enc.actbin", "_W_dec.actbin", "_b_dec.actbin", ".json"]
            .iter()
            .map(|suffix| format!("{stem}{suffix}"))
            .collect())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let side: SaeSidecar = read_json(dir.join(format!("{stem}.json")))?;
        let model = Self {
            w_enc: read_actbin(dir.join(format!("{stem}_W_enc.actbin")))?,
            b_enc: read_actbin(dir.join(format!("{stem}_b_enc.actbin")))?.into_data(),
            w_dec: read_actbin(dir.join(format!("{stem}_W_dec.actbin")))?,
            b_dec: read_actbin(dir.join(format!("{stem}_b_dec.actbin")))?.into_data(),
            k: side.k,
            config: side.config,
            train_log: side.loss_log,
            dead_latents: side.dead_latents,
        };
        if model.w_enc.shape() != model.w_dec.shape()
            || model.b_enc.len() != side.m
            || model.b_dec.len() != model.d()
            || model.m() != side.m
        {
            return Err(Error::ShapeMismatch(format!("SAE files under {stem} disagree")));
        }
        Ok(model)
    }
}

impl FeatureMap for SaeModel {
    fn apply(&self, rows: &Matrix) -> Result<Matrix> {
        self.encode_rows(rows)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SaeSidecar {
    m: usize,
    k: usize,
    config: SaeConfig,
    loss_log: Vec<f64>,
    dead_latents: Vec<usize>,
}

/// TopK latent vector of one input.
pub fn encode(model: &SaeModel, h: &[f64]) -> Result<Vec<f64>> {
    Ok(model.encode_rows(&row_matrix(h)?)?.into_data())
}

pub fn decode(model: &SaeModel, z: &[f64]) -> Result<Vec<f64>> {
    Ok(model.decode_rows(&row_matrix(z)?)?.into_data())
}

fn mean_sq_diff(a: &Matrix, b: &Matrix) -> f64 {
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    total / a.rows().max(1) as f64
}

/// Loss and gradients on `batch`. Only latents active in `z` pass gradient
/// back to the encoder.
pub fn sae_loss_and_grads(model: &SaeModel, batch: &Matrix) -> Result<(f64, SaeGrads)> {
    let n = batch.rows() as f64;
    let z = model.encode_rows(batch)?;
    let recon = model.decode_rows(&z)?;
    let loss = mean_sq_diff(&recon, batch);
    let mut dr = recon;
    for (r, h) in dr.data_mut().iter_mut().zip(batch.data()) {
        *r = 2.0 * (*r - h) / n;
    }
    let mut w_dec = Matrix::zeros(model.m(), model.d());
    gemm(1.0, &z, Trans::Yes, &dr, Trans::No, 0.0, &mut w_dec)?;
    let b_dec = row_matrix(&dr.column_sums())?;
    let mut dz = Matrix::zeros(batch.rows(), model.m());
    gemm(1.0, &dr, Trans::No, &model.w_dec, Trans::Yes, 0.0, &mut dz)?;
    for (g, &zi) in dz.data_mut().iter_mut().zip(z.data()) {
        if zi <= 0.0 {
            *g = 0.0;
        }
    }
    let mut w_enc = Matrix::zeros(model.m(), model.d());
    gemm(1.0, &dz, Trans::Yes, batch, Trans::No, 0.0, &mut w_enc)?;
    let b_enc = row_matrix(&dz.column_sums())?;
    Ok((
        loss,
        SaeGrads {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        },
    ))
}

fn normalize_rows_in_place(m: &mut Matrix) {
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n > 0.0 {
            m.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
    }
}

fn init_model(data: &Matrix, cfg: &SaeConfig, rng: &mut Prng) -> SaeModel {
    let d = data.cols();
    let m = cfg.latents(d);
    let mut w_dec = rng::gaussian_matrix(rng, m, d, 1.0);
    normalize_rows_in_place(&mut w_dec);
    SaeModel {
        w_enc: w_dec.clone(),
        b_enc: vec![0.0; m],
        w_dec,
        b_dec: data.column_means(),
        k: cfg.k,
        config: *cfg,
        train_log: Vec::new(),
        dead_latents: Vec::new(),
    }
}

/// Adam on the mean squared reconstruction error; decoder rows are put back
/// on the unit sphere after every step.
pub fn train_sae(instance_acts: &Matrix, cfg: &SaeConfig) -> Result<SaeModel> {
    let n = instance_acts.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("SAE training needs ≥ 2 rows, got {n}")));
    }
    let m = cfg.latents(instance_acts.cols());
    if cfg.k == 0 || cfg.k > m {
        return Err(Error::InvalidArgument(format!("need 1 ≤ k ≤ m (k={}, m={m})", cfg.k)));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut model = init_model(instance_acts, cfg, &mut rng);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut states = [
        AdamState::for_params(&model.w_enc),
        AdamState::new(1, m),
        AdamState::for_params(&model.w_dec),
        AdamState::new(1, model.d()),
    ];
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_log = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..cfg.epochs {
        if batch < n {
            rng::shuffle(&mut rng, &mut order);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let rows = if batch < n {
                instance_acts.select_rows(chunk)
            } else {
                instance_acts.clone()
            };
            let (loss, g) = sae_loss_and_grads(&model, &rows)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { stage: "sae", index: epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            let mut b_enc = row_matrix(&model.b_enc)?;
            let mut b_dec = row_matrix(&model.b_dec)?;
            adam_step(&mut model.w_enc, &g.w_enc, &mut states[0], &adam, false)?;
            adam_step(&mut b_enc, &g.b_enc, &mut states[1], &adam, false)?;
            adam_step(&mut model.w_dec, &g.w_dec, &mut states[2], &adam, false)?;
            adam_step(&mut b_dec, &g.b_dec, &mut states[3], &adam, false)?;
            model.b_enc = b_enc.into_data();
            model.b_dec = b_dec.into_data();
            normalize_rows_in_place(&mut model.w_dec);
        }
        train_log.push(epoch_loss / n as f64);
    }
    let z = model.encode_rows(instance_acts)?;
    let final_loss = mean_sq_diff(&model.decode_rows(&z)?, instance_acts);
    if !final_loss.is_finite() {
        return Err(Error::Divergence { stage: "sae", index: cfg.epochs });
    }
    train_log.push(final_loss);
    model.dead_latents = (0..m)
        .filter(|&j| (0..n).all(|i| z.get(i, j) <= 0.0))
        .collect();
    if !model.dead_latents.is_empty() {
        log::info!("sae: {} of {m} latents dead after training", model.dead_latents.len());
    }
    model.train_log = train_log;
    Ok(model)
}

/// Class-token vs instance latent sets for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub class: usize,
    pub label: String,
    pub token_topk: Vec<usize>,
    pub instance_topk: Vec<usize>,
    pub intersection_size: usize,
    pub k: usize,
}

/// For each class, the `k_top` largest preactivations of its class token
/// against the `k_top` latents most often selected on its instances
/// (frequency ties broken by higher mean activation, then lower index).
pub fn feature_overlap(
    model: &SaeModel,
    bundle: &ActivationBundle,
    id: HeadId,
    k_top: usize,
) -> Result<Vec<OverlapReport>> {
    if k_top == 0 || k_top > model.m() {
        return Err(Error::InvalidArgument(format!(
            "k_top {k_top} must lie in 1..={}",
            model.m()
        )));
    }
    let pre = model.preactivations(bundle.class_acts(id)?)?;
    let z = model.encode_rows(bundle.instance_acts(id)?)?;
    let labels = bundle.labels();
    let mut out = Vec::with_capacity(bundle.n_classes());
    for class in 0..bundle.n_classes() {
        let mut token_rank: Vec<usize> = (0..model.m()).collect();
        let row = pre.row(class);
        token_rank.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        token_rank.truncate(k_top);

        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut count = vec![0usize; model.m()];
        let mut mass = vec![0.0; model.m()];
        for &i in &members {
            for (j, &v) in z.row(i).iter().enumerate() {
                if v > 0.0 {
                    count[j] += 1;
                    mass[j] += v;
                }
            }
        }
        let mut inst_rank: Vec<usize> = (0..model.m()).collect();
        inst_rank.sort_by(|&a, &b| {
            count[b]
                .cmp(&count[a])
                .then(mass[b].total_cmp(&mass[a]))
                .then(a.cmp(&b))
        });
        inst_rank.truncate(k_top);

        let tok: BTreeSet<usize> = token_rank.iter().copied().collect();
        let intersection_size = inst_rank.iter().filter(|j| tok.contains(j)).count();
        out.push(OverlapReport {
            class,
            label: bundle.manifest().classes[class].clone(),
            token_topk: token_rank,
            instance_topk: inst_rank,
            intersection_size,
            k: k_top,
        });
    }
    Ok(out)
}

/// For each ground-truth direction (row of `truth`), the highest cosine
/// with any decoder row.
pub fn best_match_cosines(model: &SaeModel, truth: &Matrix) -> Result<Vec<f64>> {
    if truth.cols() != model.d() {
        return Err(Error::DimensionMismatch(format!(
            "truth has {} columns, decoder {}",
            truth.cols(),
            model.d()
        )));
    }
    truth
        .iter_rows()
        .map(|t| {
            model
                .w_dec
                .iter_rows()
                .map(|w| cosine(t, w))
                .try_fold(f64::NEG_INFINITY, |best, c| c.map(|c| best.max(c)))
        })
        .collect()
}

/// Ground-truth directions matched at cosine `>= threshold`.
pub fn recovered_count(model: &SaeModel, truth: &Matrix, threshold: f64) -> Result<usize> {
    Ok(best_match_cosines(model, truth)?
        .iter()
        .filter(|&&c| c >= threshold)
        .count())
}

/// Unified-rule score of one head with a fitted SAE.
pub fn sae_classify(model: &SaeModel, bundle: &ActivationBundle, id: HeadId) -> Result<HeadScore> {
    let fitted = model.fitted_head(id, bundle.class_acts(id)?)?;
    let pred = fitted.predict(bundle.instance_acts(id)?)?;
    HeadScore::from_predictions(id, Method::Sae, &pred, &bundle.labels(), bundle.n_classes())
}

/// Trains one SAE per head (in parallel) on instances and scores it.
pub fn sae_scores(
    bundle: &ActivationBundle,
    cfg: &SaeConfig,
    opts: EvalOptions,
) -> Result<(Vec<HeadScore>, BTreeMap<HeadId, SaeModel>)> {
    let models: BTreeMap<HeadId, SaeModel> = bundle
        .head_ids()
        .par_iter()
        .map(|&id| {
            let head_cfg = SaeConfig {
                seed: head_seed(cfg.seed, id),
                ..*cfg
            };
            Ok((id, train_sae(bundle.instance_acts(id)?, &head_cfg)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    let scores = per_head_accuracy(bundle, Method::Sae, opts, |id, c, _| {
        models[&id].fitted_head(id, c)
    })?;
    Ok((scores, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy(m: usize, d: usize, k: usize, seed: u64) -> SaeModel {
        let mut r = rng::seeded(seed);
        let mut w_dec = rng::gaussian_matrix(&mut r, m, d, 1.0);
        normalize_rows_in_place(&mut w_dec);
        SaeModel {
            w_enc: rng::gaussian_matrix(&mut r, m, d, 1.0),
            b_enc: rng::gaussian_vec(&mut r, m),
            w_dec,
            b_dec: rng::gaussian_vec(&mut r, d),
            k,
            config: SaeConfig::default(),
            train_log: Vec::new(),
            dead_latents: Vec::new(),
        }
    }

    #[test]
    fn full_k_with_positive_preactivations_is_identity_on_latents() {
        let mut model = toy(4, 3, 4, 1);
        model.b_enc = vec![100.0; 4];
        let h = [0.1, -0.2, 0.3];
        let z = encode(&model, &h).unwrap();
        let pre = model.preactivations(&row_matrix(&h).unwrap()).unwrap();
        assert_eq!(z, pre.into_data());
    }

    #[test]
    fn zero_input_and_bias_encode_to_zero() {
        let mut model = toy(5, 3, 2, 2);
        model.b_enc = vec![0.0; 5];
        assert!(encode(&model, &[0.0; 3]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decode_basics() {
        let model = toy(5, 3, 2, 3);
        assert_eq!(decode(&model, &[0.0; 5]).unwrap(), model.b_dec);
        let mut e = vec![0.0; 5];
        e[2] = 1.0;
        let out = decode(&model, &e).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(out[j], model.w_dec.get(2, j) + model.b_dec[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let model = toy(8, 6, 3, 4);
        let mut r = rng::seeded(5);
        let batch = rng::gaussian_matrix(&mut r, 5, 6, 1.0);
        let (_, g) = sae_loss_and_grads(&model, &batch).unwrap();
        let step = 1e-5;
        let loss = |m: &SaeModel| sae_loss_and_grads(m, &batch).unwrap().0;
        let check = |analytic: f64, plus: SaeModel, minus: SaeModel| {
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!(
                (fd - analytic).abs() <= 1e-3 * analytic.abs().max(1e-2),
                "fd {fd} vs analytic {analytic}"
            );
        };
        for i in 0..8 {
            for j in 0..6 {
                for (which, grad) in [(0, &g.w_enc), (1, &g.w_dec)] {
                    let mut p = model.clone();
                    let mut q = model.clone();
                    let (mp, mq) = if which == 0 {
                        (&mut p.w_enc, &mut q.w_enc)
                    } else {
                        (&mut p.w_dec, &mut q.w_dec)
                    };
                    mp.set(i, j, mp.get(i, j) + step);
                    mq.set(i, j, mq.get(i, j) - step);
                    check(grad.get(i, j), p, q);
                }
            }
            let mut p = model.clone();
            let mut q = model.clone();
            p.b_enc[i] += step;
            q.b_enc[i] -= step;
            check(g.b_enc.get(0, i), p, q);
        }
        for j in 0..6 {
            let mut p = model.clone();
            let mut q = model.clone();
            p.b_dec[j] += step;
            q.b_dec[j] -= step;
            check(g.b_dec.get(0, j), p, q);
        }
    }

    #[test]
    fn training_descends_and_keeps_unit_decoder() {
        let mut r = rng::seeded(6);
        let data = rng::gaussian_matrix(&mut r, 40, 6, 1.0);
        let cfg = SaeConfig {
            m: Some(12),
            k: 3,
            lr: 1e-2,
            epochs: 30,
            batch_size: Some(16),
            seed: 1,
        };
        let model = train_sae(&data, &cfg).unwrap();
        assert_eq!(model.train_log.len(), 31);
        assert!(model.train_log[30] < model.train_log[0]);
        for row in model.w_dec.iter_rows() {
            assert_abs_diff_eq!(norm(row), 1.0, epsilon = 1e-4);
        }
        assert_eq!(model, train_sae(&data, &cfg).unwrap());
    }

    #[test]
    fn config_errors() {
        let data = Matrix::identity(4);
        let bad = SaeConfig { m: Some(2), k: 3, ..Default::default() };
        assert!(train_sae(&data, &bad).is_err());
        assert!(train_sae(&Matrix::identity(1), &SaeConfig { k: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let model = toy(6, 4, 2, 9);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), "L1H0").unwrap();
        let back = SaeModel::load(dir.path(), "L1H0").unwrap();
        assert_eq!(back.w_enc, crate::store::round_to_f32(&model.w_enc));
        assert_eq!(back.k, 2);
    }

    proptest! {
        #[test]
        fn at_most_k_active(seed in 0u64..200, k in 1usize..6) {
            let model = toy(6, 4, k, seed);
            let mut r = rng::seeded(seed + 1000);
            let h = rng::gaussian_vec(&mut r, 4);
            let z = encode(&model, &h).unwrap();
            prop_assert!(z.iter().filter(|&&x| x != 0.0).count() <= k);
            prop_assert!(z.iter().all(|&x| x >= 0.0));
        }
    }
}
