use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e}, tolerance {tolerance:.3e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("matrix not positive definite even with jitter {jitter:.3e} (cap reached)")]
    JitterCapExceeded { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("N = {n} exceeds the validation-mode cap {cap}; enable validation mode or raise the cap")]
    ValidationModeRequired { n: usize, cap: usize },

    #[error("operation requires a subset-of-data auxiliary distribution")]
    AuxKindUnsupported,

    #[error("epsilon must be non-negative, got {0}")]
    NegativeEps(f64),

    #[error("covariance matrix is singular")]
    SingularCovariance,

    #[error("delta must be positive, got {0}")]
    NonPositiveDelta(f64),

    #[error("inflation factor must exceed one, got {0}")]
    InflateNotAboveOne(f64),

    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),

    #[error("objective returned a non-finite value")]
    NonFiniteObjective,

    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no rows left after dropping missing values")]
    EmptyAfterCleaning,

    #[error("config error: {0}")]
    Config(String),

    #[error("result table is empty")]
    EmptyTable,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
