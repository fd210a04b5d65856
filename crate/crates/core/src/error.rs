use thiserror::Error;

/// Errors raised anywhere in the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Usage-class errors map to exit code 1, data-class errors to exit code 2.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Index(_))
    }
}
