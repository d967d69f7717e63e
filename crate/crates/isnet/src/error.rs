use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// `Usage` -> 2, `Data`/`Format` -> 3, everything else -> 1.
#[derive(Debug, Error)]
pub enum IsnetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IsnetError>;

impl IsnetError {
    pub fn dim(msg: impl Into<String>) -> Self {
        IsnetError::Dimension(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        IsnetError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        IsnetError::Data(msg.into())
    }

    /// Process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            IsnetError::Usage(_) => 2,
            IsnetError::Data(_) | IsnetError::Format { .. } | IsnetError::Io(_) => 3,
            _ => 1,
        }
    }
}
