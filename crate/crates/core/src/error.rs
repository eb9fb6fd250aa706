use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the summation library.
#[derive(Debug, Error)]
pub enum EifmmError {
    #[error("unknown kernel `{0}` (expected one of: laplace, oscillatory, gaussian, multiquadric)")]
    UnknownKernel(String),

    #[error("invalid tree configuration: {0}")]
    InvalidConfig(String),

    #[error("point {index} at {coords:?} lies outside the computational domain")]
    PointOutsideDomain { index: usize, coords: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid particle system: {0}")]
    InvalidSystem(String),

    #[error("operator cache does not match the request: {0}")]
    CacheMismatch(String),

    #[error("operator cache version {found} is not supported (expected {expected})")]
    CacheVersion { found: u64, expected: u64 },

    #[error("operator cache is corrupt or truncated: {0}")]
    CacheCorrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EifmmError>;
