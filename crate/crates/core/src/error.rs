use thiserror::Error;

/// Errors raised by the estimation, segmentation and forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid lag window: tau0 = {tau0} with T = {t}")]
    InvalidWindow { tau0: usize, t: usize },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("segmentations are incomparable: {0}")]
    IncomparableSegmentations(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidWindow { .. }
            | Error::IndexOutOfRange(_)
            | Error::IncomparableSegmentations(_) => ErrorKind::Validation,
            Error::DimensionMismatch { .. } | Error::InsufficientData { .. } | Error::Empty(_) => {
                ErrorKind::Data
            }
            Error::NotPositiveSemidefinite { .. } | Error::NonFinite(_) | Error::Degenerate(_) => ErrorKind::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
