// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{build_dataset, is_prime, Example, SEQ_LEN};
use super::fourier::fourier_concentration;
use super::model::{backward, forward, Arch, HeadType, Params};
use super::probe::{linear_probe_fit, LinearProbe};
use crate::error::{Error, Result};
use crate::numkit::rng::{self, derive_seed};
use crate::numkit::{adam_step, argmax, cross_entropy, AdamConfig, AdamState, Matrix};
use crate::store::{write_actbin, write_json};

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

fn d128() -> usize {
    128
}
fn four() -> usize {
    4
}
fn two() -> usize {
    2
}
fn w512() -> usize {
    512
}
fn head_default() -> HeadType {
    HeadType::MlpHead
}
fn half() -> f64 {
    0.5
}
fn lr_default() -> f64 {
    1e-3
}
fn wd_default() -> f64 {
    1.0
}
fn beta1_default() -> f64 {
    0.9
}
fn beta2_default() -> f64 {
    0.98
}
fn steps_default() -> usize {
    30_000
}
fn eval_default() -> usize {
    100
}
fn probe_lr_default() -> f64 {
    1e-2
}
fn probe_epochs_default() -> usize {
    500
}
fn yes() -> bool {
    true
}

/// Every knob of one run; omitted JSON fields take the defaults below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrokConfig {
    pub p: usize,
    #[serde(default = "d128")]
    pub d_model: usize,
    #[serde(default = "four")]
    pub n_heads: usize,
    #[serde(default = "two")]
    pub n_layers: usize,
    #[serde(default = "w512")]
    pub mlp_width: usize,
    #[serde(default = "head_default")]
    pub head_type: HeadType,
    #[serde(default = "half")]
    pub train_frac: f64,
    #[serde(default = "lr_default")]
    pub lr: f64,
    #[serde(default = "wd_default")]
    pub weight_decay: f64,
    #[serde(default = "beta1_default")]
    pub beta1: f64,
    #[serde(default = "beta2_default")]
    pub beta2: f64,
    #[serde(default = "steps_default")]
    pub max_steps: usize,
    #[serde(default = "eval_default")]
    pub eval_interval: usize,
    #[serde(default = "probe_lr_default")]
    pub probe_lr: f64,
    #[serde(default = "probe_epochs_default")]
    pub probe_epochs: usize,
    /// Train a detached probe alongside the model and log its accuracy.
    #[serde(default = "yes")]
    pub concurrent_probe: bool,
    #[serde(default)]
    pub seed: u64,
}

impl GrokConfig {
    pub fn new(p: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "p": p })).expect("defaults are complete")
    }

    pub fn vocab(&self) -> usize {
        self.p + 2
    }

    pub fn arch(&self) -> Arch {
        Arch {
            vocab: self.vocab(),
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            mlp_width: self.mlp_width,
            head_type: self.head_type,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !is_prime(self.p) || self.p < 3 {
            return bad(format!("p = {} must be a prime ≥ 3", self.p));
        }
        if self.n_layers != 2 {
            return bad(format!("n_layers must be 2, got {}", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad(format!("train_frac {} outside (0, 1)", self.train_frac));
        }
        if self.eval_interval == 0 || self.mlp_width == 0 {
            return bad("eval_interval and mlp_width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Validation accuracy of the concurrently trained probe.
    pub probe_val_acc: Option<f64>,
}

/// Scalar outcome of a run (everything but the weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrokMetrics {
    pub config: GrokConfig,
    pub series: Vec<EvalPoint>,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Final validation accuracy of the concurrently trained probe, or of
    /// the refit probe when no concurrent probe ran.
    pub probe_accuracy: f64,
    /// Probe fitted afresh on the final hidden states.
    pub probe_refit_accuracy: f64,
    pub probe_refit_train_accuracy: f64,
    pub fourier_kappa: f64,
    /// One-sided embedding power spectrum, frequencies `0..=p/2`.
    pub spectrum: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrokRun {
    pub metrics: GrokMetrics,
    /// Number-token embeddings at the end of training, `p × d_model`.
    pub embedding: Matrix,
    pub params: Params,
}

impl GrokRun {
    /// Writes `metrics.json` and `embedding.actbin`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        write_json(&self.metrics, dir.join("metrics.json"))?;
        write_actbin(&self.embedding, dir.join("embedding.actbin"))?;
        Ok(vec!["metrics.json".into(), "embedding.actbin".into()])
    }
}

fn unpack(examples: &[Example]) -> (Vec<[usize; SEQ_LEN]>, Vec<usize>) {
    examples.iter().map(|e| (e.tokens, e.label)).unzip()
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains the transformer full batch with AdamW (decay on weight matrices
/// only) and evaluates every `eval_interval` steps and at the end.
pub fn train_run(cfg: &GrokConfig) -> Result<GrokRun> {
    cfg.check()?;
    let split = build_dataset(cfg.p, cfg.train_frac, derive_seed(cfg.seed, DATA_STREAM))?;
    let (train_tok, train_y) = unpack(&split.train);
    let (val_tok, val_y) = unpack(&split.val);
    let arch = cfg.arch();
    let mut params = Params::init(&arch, &mut rng::seeded(derive_seed(cfg.seed, INIT_STREAM)));
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let decay: Vec<bool> = params.tensors().iter().map(|(_, d)| *d).collect();
    let mut states: Vec<AdamState> = params
        .tensors()
        .iter()
        .map(|(t, _)| AdamState::for_params(t))
        .collect();
    let mut probe = cfg
        .concurrent_probe
        .then(|| LinearProbe::new(cfg.d_model, cfg.p, cfg.probe_lr));
    let mut series = Vec::new();

    let mut step = 0;
    loop {
        let fwd = forward(&params, &arch, &train_tok)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits, &train_y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: "grok training", index: step });
        }
        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let vf = forward(&params, &arch, &val_tok)?;
            let (val_loss, _) = cross_entropy(&vf.logits, &val_y)?;
            let point = EvalPoint {
                step,
                train_loss: loss,
                train_acc: accuracy(&fwd.logits, &train_y),
                val_loss,
                val_acc: accuracy(&vf.logits, &val_y),
                probe_val_acc: probe.as_ref().map(|p| p.accuracy(&vf.hidden, &val_y)).transpose()?,
            };
            log::info!(
                "grok seed {} step {step}: loss {:.4} train {:.3} val {:.3}",
                cfg.seed,
                point.train_loss,
                point.train_acc,
                point.val_acc
            );
            series.push(point);
        }
        if step == cfg.max_steps {
            break;
        }
        if let Some(p) = probe.as_mut() {
            // the probe only ever sees a copy of the hidden states
            let detached = fwd.hidden.clone();
            p.step(&detached, &train_y)?;
        }
        let grads = backward(&params, &arch, &fwd, &dlogits)?;
        let grad_tensors = grads.tensors();
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            adam_step(t, grad_tensors[i].0, &mut states[i], &adam, decay[i])?;
        }
        step += 1;
    }

    let last = *series.last().expect("final step is always evaluated");
    let train_hidden = forward(&params, &arch, &train_tok)?.hidden;
    let val_hidden = forward(&params, &arch, &val_tok)?.hidden;
    let fit = linear_probe_fit(
        &train_hidden,
        &train_y,
        &val_hidden,
        &val_y,
        cfg.p,
        cfg.probe_lr,
        cfg.probe_epochs,
    )?;
    let embedding = params.embed.select_rows(&(0..cfg.p).collect::<Vec<_>>());
    let spectrum = crate::numkit::dft_power(&embedding)?.freq_power;
    let metrics = GrokMetrics {
        config: *cfg,
        series,
        train_acc: last.train_acc,
        val_acc: last.val_acc,
        probe_accuracy: last.probe_val_acc.unwrap_or(fit.val_accuracy),
        probe_refit_accuracy: fit.val_accuracy,
        probe_refit_train_accuracy: fit.train_accuracy,
        fourier_kappa: fourier_concentration(&embedding)?,
        spectrum,
        n_train: train_y.len(),
        n_val: val_y.len(),
        n_params: params.n_params(),
    };
    Ok(GrokRun {
        metrics,
        embedding,
        params,
    })
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side has no rank variance or fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub probe_acc: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: GrokConfig,
    pub rows: Vec<SweepRow>,
    /// Spearman ρ between probe accuracy and κ; `None` when undefined.
    pub spearman_probe_kappa: Option<f64>,
}

impl SweepReport {
    pub fn from_runs(config: GrokConfig, runs: &[GrokRun]) -> Self {
        let rows: Vec<SweepRow> = runs
            .iter()
            .map(|r| SweepRow {
                seed: r.metrics.config.seed,
                train_acc: r.metrics.train_acc,
                val_acc: r.metrics.val_acc,
                probe_acc: r.metrics.probe_accuracy,
                kappa: r.metrics.fourier_kappa,
            })
            .collect();
        Self {
            config,
            spearman_probe_kappa: spearman(
                &rows.iter().map(|r| r.probe_acc).collect::<Vec<_>>(),
                &rows.iter().map(|r| r.kappa).collect::<Vec<_>>(),
            ),
            rows,
        }
    }

    /// CSV `seed,val_acc,probe_acc,kappa`.
    pub fn csv(&self) -> String {
        let mut out = String::from("seed,val_acc,probe_acc,kappa\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.seed, r.val_acc, r.probe_acc, r.kappa));
        }
        out
    }
}

/// Runs every seed (in parallel) with the rest of `cfg` fixed.
pub fn seed_sweep(cfg: &GrokConfig, seeds: &[u64]) -> Result<(SweepReport, Vec<GrokRun>)> {
    if seeds.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "a sweep needs at least 5 seeds, got {}",
            seeds.len()
        )));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| train_run(&GrokConfig { seed, ..*cfg }))
        .collect::<Result<Vec<_>>>()?;
    Ok((SweepReport::from_runs(*cfg, &runs), runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head_type: HeadType) -> GrokConfig {
        GrokConfig {
            d_model: 8,
            n_heads: 2,
            mlp_width: 16,
            head_type,
            max_steps: 6,
            eval_interval: 3,
            probe_epochs: 5,
            ..GrokConfig::new(5)
        }
    }

    #[test]
    fn defaults() {
        let c = GrokConfig::new(97);
        assert_eq!((c.d_model, c.n_heads, c.mlp_width, c.n_layers), (128, 4, 512, 2));
        assert_eq!(c.vocab(), 99);
        assert!(GrokConfig { n_layers: 3, ..c }.check().is_err());
        assert!(GrokConfig::new(9).check().is_err());
    }

    #[test]
    fn runs_are_bit_identical() {
        let a = train_run(&tiny(HeadType::MlpHead)).unwrap();
        let b = train_run(&tiny(HeadType::MlpHead)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.series.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 3, 6]);
        assert_eq!(a.embedding.shape(), (5, 8));
    }

    #[test]
    fn probe_never_touches_the_model() {
        for head in [HeadType::LinearUnembed, HeadType::MlpHead] {
            let with = train_run(&tiny(head)).unwrap();
            let without = train_run(&GrokConfig { concurrent_probe: false, ..tiny(head) }).unwrap();
            assert_eq!(with.params, without.params);
            assert!(without.metrics.series.iter().all(|p| p.probe_val_acc.is_none()));
            assert_eq!(without.metrics.probe_accuracy, without.metrics.probe_refit_accuracy);
            assert_eq!(
                Some(with.metrics.probe_accuracy),
                with.metrics.series.last().unwrap().probe_val_acc
            );
        }
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        // ties share their average rank
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn sweep_needs_five_seeds() {
        assert!(seed_sweep(&tiny(HeadType::MlpHead), &[1, 2]).is_err());
    }
}
