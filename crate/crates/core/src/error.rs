use std::path::PathBuf;

use thiserror::Error;

use crate::volume::Dims;

/// Errors produced by the numerical routines and volume I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: Dims, right: Dims },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("volume data length {len} does not match dims {dims} ({expected} voxels)")]
    DataLength { dims: Dims, len: usize, expected: usize },

    #[error("non-finite value at flat index {index} in {path}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("missing sidecar {0}")]
    MissingSidecar(PathBuf),

    #[error("malformed sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// A monotone-descent contract was broken; carries the objective trace up to the failure.
    #[error("non-monotone descent in {solver} at iteration {iteration}: {previous} -> {current}")]
    Descent {
        solver: &'static str,
        iteration: usize,
        previous: f64,
        current: f64,
        trace: Vec<f64>,
    },

    #[error("root bracketing failed: {0}")]
    Bracketing(String),

    #[error("no bead regions found")]
    NoRegions,

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for the failures reported by solvers whose descent guarantee broke.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Descent { .. } | Error::Bracketing(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
