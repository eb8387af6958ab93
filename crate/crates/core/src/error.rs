use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid model, dataset or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Operation is not allowed in the current object state.
    #[error("state error: {0}")]
    State(String),

    /// Malformed clip, checkpoint or tensor stream.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
