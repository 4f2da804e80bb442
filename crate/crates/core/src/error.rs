use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frozen parameter `{0}` cannot be optimized")]
    Frozen(String),

    #[error("model is not frozen: {0}")]
    NotFrozen(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("empty dataset: {0}")]
    Empty(String),

    #[error("bad magic in {path}: expected {expected}, found {found}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("truncated payload in {path}: {detail}")]
    Truncated { path: String, detail: String },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
