// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ground-truth activation generators.
//!
//! Instances follow `h = α·d_k + η` with `η` orthogonal to every class
//! direction, class tokens are `λ·d_k`, and factorized vocabularies are
//! sparse positive mixtures of orthonormal feature directions. All draws come
//! from [`crate::numkit::rng`] in a fixed order, so a config and seed pin the
//! output bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::rng::{self, derive_seed, Prng};
use crate::numkit::{dot, norm, Matrix};
use crate::store::{
    expected_heads, ActivationBundle, InstancePrompt, Manifest, DEFAULT_POSITION_POLICY,
};

fn one() -> usize {
    1
}

fn default_alpha_range() -> [f64; 2] {
    [0.5, 2.0]
}

/// Parameters of a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Activation dimension.
    pub d: usize,
    /// Number of classes.
    #[serde(alias = "K")]
    pub k: usize,
    pub n_per_class: usize,
    /// Euclidean norm of every instance's residual `η`.
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default = "default_alpha_range")]
    pub alpha_range: [f64; 2],
    /// Pairwise cosine between class directions, in `[0, 1)`.
    #[serde(default)]
    pub class_cos: f64,
    /// Weight of a direction shared by all classes, added before renormalizing.
    #[serde(default)]
    pub shared_component_weight: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "one")]
    pub heads: usize,
}

impl SynthConfig {
    pub fn new(d: usize, k: usize, n_per_class: usize) -> Self {
        Self {
            d,
            k,
            n_per_class,
            noise_scale: 0.0,
            alpha_range: default_alpha_range(),
            class_cos: 0.0,
            shared_component_weight: 0.0,
            seed: 0,
            layers: 1,
            heads: 1,
        }
    }

    pub fn alpha_mean(&self) -> f64 {
        0.5 * (self.alpha_range[0] + self.alpha_range[1])
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::Infeasible("need d ≥ 1 and K ≥ 1".into()));
        }
        if self.k > self.d {
            return Err(Error::Infeasible(format!(
                "{} classes cannot have distinct directions in {} dimensions",
                self.k, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.class_cos) {
            return Err(Error::Infeasible(format!(
                "class_cos {} outside [0, 1)",
                self.class_cos
            )));
        }
        if self.shared_component_weight < 0.0 {
            return Err(Error::Infeasible("negative shared_component_weight".into()));
        }
        if self.shared_component_weight > 0.0 && self.k + 1 > self.d {
            return Err(Error::Infeasible(format!(
                "a shared direction needs K + 1 ≤ d (K={}, d={})",
                self.k, self.d
            )));
        }
        let [lo, hi] = self.alpha_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Infeasible(format!(
                "alpha_range [{lo}, {hi}] must be a positive interval"
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Infeasible("noise_scale must be ≥ 0".into()));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Infeasible("need at least one layer and head".into()));
        }
        Ok(())
    }
}

/// Gram–Schmidt on `vectors`, dropping any that are (numerically) dependent.
pub(crate) fn orthonormal_basis(vectors: impl IntoIterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in vectors {
        let n0 = norm(&v);
        // two passes keep the basis orthogonal to rounding level
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
            }
        }
        let n = norm(&v);
        if n > 1e-10 * n0.max(1e-300) {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn random_orthonormal(rng: &mut Prng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis = Vec::with_capacity(count);
    while basis.len() < count {
        let mut candidates = basis.clone();
        candidates.push(rng::gaussian_vec(rng, d));
        basis = orthonormal_basis(candidates);
    }
    basis
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(g: &Matrix) -> Result<Matrix> {
    let n = g.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let v = g.get(i, i) - s;
                if v <= 0.0 {
                    return Err(Error::Infeasible("Gram matrix not positive definite".into()));
                }
                l.set(i, i, v.sqrt());
            } else {
                l.set(i, j, (g.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// `K × d` unit class directions with pairwise cosine `class_cos`, optionally
/// tilted towards a shared direction, drawn from `cfg.seed`.
pub fn gen_directions(cfg: &SynthConfig) -> Result<Matrix> {
    cfg.check()?;
    let mut rng = rng::seeded(cfg.seed);
    let k = cfg.k;
    let gram = Matrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { cfg.class_cos });
    let coords = cholesky(&gram)?;
    let extra = usize::from(cfg.shared_component_weight > 0.0);
    let basis = random_orthonormal(&mut rng, k + extra, cfg.d);

    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let mut v = vec![0.0; cfg.d];
        for (j, b) in basis.iter().take(k).enumerate() {
            let c = coords.get(i, j);
            v.iter_mut().zip(b).for_each(|(x, bj)| *x += c * bj);
        }
        if extra == 1 {
            let w = cfg.shared_component_weight;
            v.iter_mut().zip(&basis[k]).for_each(|(x, s)| *x += w * s);
        }
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    Matrix::from_rows(&rows)
}

/// Manifest describing a synthetic bundle.
pub fn synthetic_manifest(cfg: &SynthConfig) -> Manifest {
    let classes: Vec<String> = (0..cfg.k).map(|c| format!("class_{c}")).collect();
    let instance_prompts = (0..cfg.k)
        .flat_map(|c| {
            (0..cfg.n_per_class).map(move |i| InstancePrompt {
                text: format!("synthetic instance {i} of class {c}"),
                class_index: c,
            })
        })
        .collect();
    Manifest {
        task_name: "synthetic".into(),
        class_token_prompts: classes.iter().map(|c| format!("<{c}>")).collect(),
        classes,
        instance_prompts,
        model_name: "synth-gen".into(),
        layers: cfg.layers,
        heads: cfg.heads,
        head_dim: cfg.d,
        position_policy: DEFAULT_POSITION_POLICY.into(),
        extra: Default::default(),
    }
}

/// One head's activations: class tokens `λ·d_k` with `λ` the midpoint of
/// `alpha_range`, and `n_per_class` instances per class in class order.
pub fn gen_head_acts(cfg: &SynthConfig, directions: &Matrix, seed: u64) -> Result<(Matrix, Matrix)> {
    cfg.check()?;
    if directions.shape() != (cfg.k, cfg.d) {
        return Err(Error::DimensionMismatch(format!(
            "directions are {:?}, config wants {}x{}",
            directions.shape(),
            cfg.k,
            cfg.d
        )));
    }
    let mut rng = rng::seeded(seed);
    let basis = orthonormal_basis(directions.iter_rows().map(<[f64]>::to_vec));
    let [lo, hi] = cfg.alpha_range;
    let lambda = cfg.alpha_mean();

    let mut class_tok = directions.clone();
    class_tok.scale(lambda);

    let mut inst = Matrix::zeros(cfg.k * cfg.n_per_class, cfg.d);
    for c in 0..cfg.k {
        for i in 0..cfg.n_per_class {
            let alpha = rng::uniform(&mut rng, lo, hi);
            let mut eta = rng::gaussian_vec(&mut rng, cfg.d);
            for b in &basis {
                let p = dot(&eta, b);
                eta.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
            }
            let en = norm(&eta);
            let s = if cfg.noise_scale > 0.0 && en > 0.0 {
                cfg.noise_scale / en
            } else {
                0.0
            };
            let row = inst.row_mut(c * cfg.n_per_class + i);
            for ((r, d), e) in row.iter_mut().zip(directions.row(c)).zip(&eta) {
                *r = alpha * d + s * e;
            }
        }
    }
    Ok((class_tok, inst))
}

/// Bundle over all `layers × heads` of `cfg`, sharing `directions`; each
/// head draws its magnitudes and residuals from its own derived seed.
pub fn gen_instances(cfg: &SynthConfig, directions: &Matrix) -> Result<ActivationBundle> {
    let manifest = synthetic_manifest(cfg);
    let mut class_acts = BTreeMap::new();
    let mut instance_acts = BTreeMap::new();
    for (index, id) in expected_heads(&manifest).into_iter().enumerate() {
        let (c, i) = gen_head_acts(cfg, directions, derive_seed(cfg.seed, 1 + index as u64))?;
        class_acts.insert(id, c);
        instance_acts.insert(id, i);
    }
    ActivationBundle::new(manifest, class_acts, instance_acts)
}

/// `gen_directions` followed by `gen_instances`.
pub fn generate_bundle(cfg: &SynthConfig) -> Result<ActivationBundle> {
    let directions = gen_directions(cfg)?;
    gen_instances(cfg, &directions)
}

/// Tokens built as sparse positive combinations of shared feature directions.
#[derive(Debug, Clone)]
pub struct FactorizedVocab {
    /// `n_tokens × d`.
    pub token_vectors: Matrix,
    /// `n_features × d`, orthonormal rows.
    pub feature_directions: Matrix,
    /// Per token, its `(feature, coefficient)` pairs.
    pub assignments: Vec<Vec<(usize, f64)>>,
}

/// Draws `count` distinct indices from `0..n`.
fn choose_distinct(rng: &mut Prng, n: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    rng::shuffle(rng, &mut pool);
    pool.truncate(count);
    pool
}

pub fn gen_factorized_vocab(
    n_tokens: usize,
    n_features: usize,
    d: usize,
    features_per_token: usize,
    seed: u64,
) -> Result<FactorizedVocab> {
    if !(1 <= features_per_token && features_per_token <= n_features && n_features <= d) {
        return Err(Error::Infeasible(format!(
            "need 1 ≤ features_per_token ({features_per_token}) ≤ n_features ({n_features}) ≤ d ({d})"
        )));
    }
    let mut rng = rng::seeded(seed);
    let features = random_orthonormal(&mut rng, n_features, d);
    let mut tokens = Matrix::zeros(n_tokens, d);
    let mut assignments = Vec::with_capacity(n_tokens);
    for t in 0..n_tokens {
        let mut chosen = choose_distinct(&mut rng, n_features, features_per_token);
        chosen.sort_unstable();
        let mut pairs = Vec::with_capacity(features_per_token);
        for f in chosen {
            let a = rng::uniform(&mut rng, 0.5, 2.0);
            tokens
                .row_mut(t)
                .iter_mut()
                .zip(&features[f])
                .for_each(|(x, df)| *x += a * df);
            pairs.push((f, a));
        }
        assignments.push(pairs);
    }
    Ok(FactorizedVocab {
        token_vectors: tokens,
        feature_directions: Matrix::from_rows(&features)?,
        assignments,
    })
}

/// `n_samples` rows, each a positive combination of `active` distinct rows
/// of `features` with coefficients from `alpha_range`. Returns the samples
/// and the active feature indices of each.
pub fn gen_sparse_mixtures(
    features: &Matrix,
    n_samples: usize,
    active: usize,
    alpha_range: [f64; 2],
    seed: u64,
) -> Result<(Matrix, Vec<Vec<usize>>)> {
    if active == 0 || active > features.rows() {
        return Err(Error::InvalidArgument(format!(
            "cannot mix {active} of {} features",
            features.rows()
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut out = Matrix::zeros(n_samples, features.cols());
    let mut support = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut chosen = choose_distinct(&mut rng, features.rows(), active);
        chosen.sort_unstable();
        for &f in &chosen {
            let a = rng::uniform(&mut rng, alpha_range[0], alpha_range[1]);
            out.row_mut(s)
                .iter_mut()
                .zip(features.row(f))
                .for_each(|(x, df)| *x += a * df);
        }
        support.push(chosen);
    }
    Ok((out, support))
}

/// Split of an attention output into the feature's transported component
/// and everything else.
#[derive(Debug, Clone)]
pub struct TransportDecomposition {
    /// `Σ_j a_j α_j`.
    pub magnitude: f64,
    /// `W_O W_V d_f`.
    pub transformed_direction: Vec<f64>,
    /// `magnitude · W_O W_V d_f`.
    pub feature_component: Vec<f64>,
    /// `Σ_j a_j W_O W_V η_j`.
    pub residual_component: Vec<f64>,
    /// Sum of the two components.
    pub output: Vec<f64>,
}

/// Output of one attention query decomposed through the OV circuit.
pub fn transport_decomposition(
    attention: &[f64],
    alphas: &[f64],
    etas: &Matrix,
    d_f: &[f64],
    ov: &Matrix,
) -> Result<TransportDecomposition> {
    if attention.len() != alphas.len() || attention.len() != etas.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} attention weights, {} magnitudes, {} residuals",
            attention.len(),
            alphas.len(),
            etas.rows()
        )));
    }
    let magnitude: f64 = attention.iter().zip(alphas).map(|(a, x)| a * x).sum();
    let transformed_direction = ov.matvec(d_f)?;
    let feature_component: Vec<f64> = transformed_direction.iter().map(|x| magnitude * x).collect();
    let mut mixed_eta = vec![0.0; etas.cols()];
    for (a, eta) in attention.iter().zip(etas.iter_rows()) {
        mixed_eta.iter_mut().zip(eta).for_each(|(m, e)| *m += a * e);
    }
    let residual_component = ov.matvec(&mixed_eta)?;
    let output = feature_component
        .iter()
        .zip(&residual_component)
        .map(|(a, b)| a + b)
        .collect();
    Ok(TransportDecomposition {
        magnitude,
        transformed_direction,
        feature_component,
        residual_component,
        output,
    })
}

/// A random attention-transport instance with its expected output.
#[derive(Debug, Clone)]
pub struct TransportCase {
    /// `n_positions × d`, rows `α_j d_f + η_j`.
    pub hidden: Matrix,
    pub alphas: Vec<f64>,
    /// `n_positions × d`, each row orthogonal to `d_f`.
    pub etas: Matrix,
    /// Attention weights of the query position (nonnegative, sum to 1).
    pub attention: Vec<f64>,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `W_O W_V`.
    pub ov: Matrix,
    /// Unit feature direction.
    pub d_f: Vec<f64>,
    pub expected: TransportDecomposition,
}

pub fn gen_attention_transport_case(d: usize, n_positions: usize, seed: u64) -> Result<TransportCase> {
    if d < 2 || n_positions == 0 {
        return Err(Error::InvalidArgument(format!(
            "need d ≥ 2 and at least one position (d={d}, n={n_positions})"
        )));
    }
    let mut rng = rng::seeded(seed);
    let d_f = random_orthonormal(&mut rng, 1, d).remove(0);
    let alphas: Vec<f64> = (0..n_positions)
        .map(|_| rng::uniform(&mut rng, 0.5, 2.0))
        .collect();
    let mut etas = Matrix::zeros(n_positions, d);
    for j in 0..n_positions {
        let mut e = rng::gaussian_vec(&mut rng, d);
        let p = dot(&e, &d_f);
        e.iter_mut().zip(&d_f).for_each(|(x, f)| *x -= p * f);
        etas.row_mut(j).copy_from_slice(&e);
    }
    let hidden = Matrix::from_fn(n_positions, d, |j, c| alphas[j] * d_f[c] + etas.get(j, c));
    let mut attention = rng::gaussian_vec(&mut rng, n_positions);
    crate::numkit::softmax_in_place(&mut attention, 1.0);
    let d_head = (d / 2).max(1);
    let w_v = rng::gaussian_matrix(&mut rng, d_head, d, 1.0 / (d as f64).sqrt());
    let w_o = rng::gaussian_matrix(&mut rng, d, d_head, 1.0 / (d_head as f64).sqrt());
    let ov = w_o.matmul(&w_v)?;
    let expected = transport_decomposition(&attention, &alphas, &etas, &d_f, &ov)?;
    Ok(TransportCase {
        hidden,
        alphas,
        etas,
        attention,
        w_v,
        w_o,
        ov,
        d_f,
        expected,
    })
}
