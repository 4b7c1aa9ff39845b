//! Error type shared across the pipeline.

use std::path::PathBuf;

/// Coarse error category, used by callers (e.g. the CLI) to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or invalid arguments.
    Config,
    /// Bad or inconsistent input data.
    Data,
    /// A required adapter or backend is not available.
    Capability,
    /// I/O and other internal failures.
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("capability not available: {0}")]
    Capability(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::ParseLine { .. } => ErrorCategory::Data,
            Error::Capability(_) => ErrorCategory::Capability,
            Error::Model(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::Json { .. } => ErrorCategory::Internal,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
