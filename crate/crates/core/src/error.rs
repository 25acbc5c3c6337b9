use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Extents disagree, an axis is out of range or empty.
    #[error("shape error: {0}")]
    Shape(String),
    /// A numeric argument is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A configuration or plan is inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// A config file line could not be parsed or validated.
    #[error("config error at line {line}, field `{field}`: {message}")]
    ConfigField {
        line: usize,
        field: String,
        message: String,
    },
    /// A function was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// NaN or Inf appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A serialized artifact is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
