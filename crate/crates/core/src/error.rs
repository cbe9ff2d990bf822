use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: malformed record: {message}", path.display())]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(
        "{}:{line}: label {index} out of range for attribute '{attribute}' ({classes} classes)",
        path.display()
    )]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        attribute: String,
        index: usize,
        classes: usize,
    },

    #[error("section '{0}' in multiple splits")]
    SectionInMultipleSplits(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{}: invalid format: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("invalid configuration: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from bad input (as opposed to a numeric or
    /// runtime failure).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numeric(_) | Error::Io { .. })
    }
}
