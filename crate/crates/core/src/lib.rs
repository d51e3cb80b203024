// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod align;
pub mod cli;
pub mod error;
pub mod grok;
pub mod numkit;
pub mod probe;
pub mod report;
pub mod sae;
pub mod store;
pub mod synth;
pub mod unsupervised;

pub use error::{Error, Result};
