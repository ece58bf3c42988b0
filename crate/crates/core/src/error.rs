use thiserror::Error;

/// Errors raised by the estimation and evaluation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("window length {w} out of range: admissible range is 1..={max} for history of {history}")]
    WindowOutOfRange { w: usize, max: usize, history: usize },

    #[error("residual history not full: {count} of {capacity}")]
    HistoryNotFull { count: usize, capacity: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("pipeline state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
