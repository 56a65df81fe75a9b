use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// An operand had the wrong extent along a named axis.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("{op}: invalid configuration: {reason}")]
    Config { op: &'static str, reason: String },

    #[error("{op}: batch of size {batch} is degenerate in training mode")]
    DegenerateBatch { op: &'static str, batch: usize },

    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Self {
        TensorError::Dimension {
            op,
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn config(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            reason: reason.into(),
        }
    }
}
