// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which half of a head's activations a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    /// Class-token rows (`K × head_dim`).
    Class,
    /// Instance-prompt rows (`N × head_dim`).
    Instance,
}

impl ActKind {
    /// File-name infix used by the bundle layout.
    pub fn infix(self) -> &'static str {
        match self {
            ActKind::Class => "class",
            ActKind::Instance => "inst",
        }
    }
}

impl std::fmt::Display for ActKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.infix())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("zero variance input")]
    ZeroVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("training diverged (non-finite loss) at {stage} {index}")]
    Divergence { stage: &'static str, index: usize },

    #[error("bad magic bytes {found:?} (expected \"ACTB\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported ACTB version {found} (expected 1)")]
    VersionMismatch { found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },

    #[error("missing {kind} activations for layer {layer}, head {head} ({})", path.display())]
    MissingFile {
        layer: usize,
        head: usize,
        kind: ActKind,
        path: PathBuf,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("instance {instance} has class index {label} but only {classes} classes exist")]
    LabelOutOfRange {
        instance: usize,
        label: usize,
        classes: usize,
    },

    #[error("class {class} has no instances")]
    EmptyClass { class: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
