//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A dataset record failed to parse or validate. `line` is 1-based.
    #[error("dataset {path}:{line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },

    /// A knowledge-store line failed to parse. `line` is 1-based.
    #[error("knowledge store {path}:{line}: {message}")]
    Knowledge {
        path: String,
        line: usize,
        message: String,
    },

    #[error("detector backend '{backend}' failed: {message}")]
    Backend { backend: String, message: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dataset(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn knowledge(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Knowledge {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
