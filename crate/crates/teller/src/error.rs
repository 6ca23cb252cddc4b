//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed a value that violates a documented precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// Two pieces of data that must agree (shapes, vocab sizes, dims) do not.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// A binary container or text artifact is malformed.
    #[error("format: {0}")]
    Format(String),

    /// Configuration file or flag set is unusable.
    #[error("config: {0}")]
    Config(String),

    /// Training aborted (non-finite loss, empty dataset, ...).
    #[error("train: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Error::Mismatch(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
