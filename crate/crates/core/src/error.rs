use thiserror::Error;

/// Errors raised by model construction, inference and forecasting.
#[derive(Debug, Error)]
pub enum GpssmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate covariance factor: diagonal entry {value:e} below {floor:e}")]
    DegenerateFactor { value: f64, floor: f64 },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("problem too large to materialize: {0}")]
    TooLarge(String),

    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GpssmError>;
