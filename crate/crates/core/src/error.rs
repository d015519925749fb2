use thiserror::Error;

#[derive(Debug, Error)]
pub enum MegaError {
    /// Shapes, lengths or depths that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MegaError>;

pub(crate) fn structural(msg: impl Into<String>) -> MegaError {
    MegaError::Structural(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> MegaError {
    MegaError::Config(msg.into())
}
