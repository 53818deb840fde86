use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the modelling core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("term `{0}` needs fitted state for prediction")]
    MissingState(String),
    #[error("non-positive Jacobian term a'(y)^T theta(x) at rows {rows:?}")]
    Jacobian { rows: Vec<usize> },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

pub(crate) fn dim_err(msg: impl Into<String>) -> CoreError {
    CoreError::Dimension(msg.into())
}
