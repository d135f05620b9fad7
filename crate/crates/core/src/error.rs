//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic in {path}: expected {expected}, found {found} (offset 0)")]
    BadMagic { path: String, expected: u32, found: u32 },

    #[error("dimension mismatch in {path}: {detail}")]
    DimensionMismatch { path: String, detail: String },

    #[error("truncated file {path}: needed {needed} bytes at offset {offset}, have {have}")]
    Truncated { path: String, offset: usize, needed: usize, have: usize },

    #[error("invalid missing rate {0}: must lie in [0,1]")]
    InvalidRate(f64),

    #[error("shape mismatch: expected {expected:?}, found {found:?} ({context})")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize>, context: String },

    #[error("time {t} outside valid range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("sample {index} has no observed entries")]
    AllMissingSample { index: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("non-finite network output")]
    NonFiniteOutput,

    #[error("non-finite guidance gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("time embedding dimension {0} must be even")]
    OddDimension(usize),

    #[error("imputation method {method} requires {requirement}")]
    MethodModelMismatch { method: String, requirement: String },

    #[error("degenerate latent space: std {std} below threshold")]
    DegenerateLatents { std: f64 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("covariance is not positive semi-definite: eigenvalue {eigenvalue}")]
    NonPsd { eigenvalue: f64 },

    #[error("probability row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
