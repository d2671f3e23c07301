use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum HalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HalError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HalError::InvalidInput(msg.into()))
}

pub(crate) fn estimation<T>(msg: impl Into<String>) -> Result<T> {
    Err(HalError::Estimation(msg.into()))
}
