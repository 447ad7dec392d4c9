use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, dimensions or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// The object is not in a state that supports the request (e.g. no EBR heads attached).
    #[error("state error: {0}")]
    State(String),

    #[error("ingestion error in {path}:{line}: {message}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
