// SPDX-License-Identifier: MIT OR Apache-2.0

//! Modular-division transformer with a linear or MLP readout, a detached
//! linear probe on its final hidden state, and Fourier analysis of the
//! learned number embeddings.

mod dataset;
mod fourier;
mod model;
mod probe;
mod train;

pub use dataset::{all_examples, build_dataset, is_prime, mod_inverse, Example, Split, SEQ_LEN};
pub use fourier::{fourier_concentration, TOP_FREQUENCIES};
pub use model::{backward, forward, Arch, BlockParams, Forward, HeadParams, HeadType, Params};
pub use probe::{linear_probe_fit, LinearProbe, ProbeFit};
pub use train::{
    seed_sweep, spearman, train_run, EvalPoint, GrokConfig, GrokMetrics, GrokRun, SweepReport,
    SweepRow,
};
