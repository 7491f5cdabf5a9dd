//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape; `op` names the operation that failed.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single operand has the wrong shape or rank for the operation.
    #[error("{op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    /// Backward pass requested on a value that is not a 1x1 scalar.
    #[error("objective is not a scalar: shape {shape:?}")]
    NonScalarObjective { shape: Vec<usize> },

    /// A forward activation went NaN or infinite inside an encoder.
    #[error("non-finite activation in {context} at layer {layer}")]
    NumericFailure { context: &'static str, layer: usize },

    /// Loss or gradient became non-finite during optimization.
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("unknown key: {0}")]
    Lookup(String),

    /// On-disk artifact is malformed or fails a consistency check.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Two artifacts that must agree do not (e.g. checkpoint vs dataset dims).
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
