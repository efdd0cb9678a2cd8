use thiserror::Error;

#[derive(Debug, Error)]
pub enum IsacError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical error at t={t}: {msg}")]
    Numerical { t: usize, msg: String },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IsacError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(IsacError::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(IsacError::Contract(msg.into()))
}
