//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch. Carries both offending shapes so the message
    /// is actionable without a debugger.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index outside a valid range (vocabulary ids, region indices, axes).
    #[error("index out of range in {what}: {index} not below {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// Violated precondition or malformed input.
    #[error("validation: {0}")]
    Validation(String),

    /// A query (record id, keyword) matched nothing.
    #[error("not found: {0}")]
    NotFound(String),

    /// Checkpoint file problems: bad magic, version, truncation, shape drift.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset parse/validation failure, with the offending line or record.
    #[error("dataset: {0}")]
    Dataset(String),

    /// An internal invariant broke; indicates a bug, not bad input.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
