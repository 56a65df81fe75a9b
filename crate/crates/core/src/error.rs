use std::path::PathBuf;

use cvaegan_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary or text input; `offset` is the byte (or line) position
    /// at which parsing failed.
    #[error("format error at offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("non-finite {loss} loss; first non-finite value produced by {origin}")]
    NonFinite { loss: String, origin: String },

    /// A failure inside a training loop, tagged with where it happened.
    #[error("epoch {epoch}, minibatch {minibatch}: {source}")]
    Training {
        epoch: usize,
        minibatch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(reason: impl Into<String>) -> Self {
        Error::Config(reason.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
