use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    #[error("invalid config: {}", .0.join("; "))]
    ConfigInvalid(Vec<String>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("{path}: {message}")]
    Path { path: PathBuf, message: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(PathBuf),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("non-finite loss `{name}` at iteration {iteration}")]
    NonFinite { name: String, iteration: u64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("checkpoint format version {found} is not supported (expected {expected}); migrate the checkpoint first")]
    Migration { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("checkpoint config hash {found} differs from the current config ({expected}); pass the override flag to load anyway")]
    ConfigHashMismatch { found: String, expected: String },

    #[error("malformed log {path} line {line}: {message}")]
    MalformedLog {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
