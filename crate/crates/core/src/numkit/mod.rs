// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric kernel shared by every other module: matrices, reductions,
//! softmax/cross-entropy, Adam, layer normalization, top-k selection, PCA
//! and DFT power spectra.

mod adam;
mod dft;
mod matrix;
mod ops;
mod pca;
pub mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dft::{dft_power, dft_power_full, Spectrum};
pub use matrix::{gemm, matmul, Matrix, Trans};
pub use ops::{
    argmax, cosine, cross_entropy, dot, layernorm, logsumexp, norm, normalize, softmax_rows,
    topk_indices, topk_select,
};
pub(crate) use ops::softmax_in_place;
pub use pca::{covariance, pca_project, Pca, PCA_MAX_ITERATIONS, PCA_TOLERANCE};
