use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::Dimension(msg.into()))
}
