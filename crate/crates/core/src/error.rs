//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation; names both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration violates one of its documented constraints.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A function argument out of its documented domain (bad label, lr <= 0, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Classification requested with no valid work-memory slot.
    #[error("work memory has no valid slot to classify")]
    EmptyWorkMemory,

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Dataset / config text could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint bytes are not a valid parameter archive.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
