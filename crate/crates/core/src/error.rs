use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation was invoked without the state it depends on.
    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed weights or latent file; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    /// Non-finite value produced during training.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
