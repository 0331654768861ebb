use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants split along the CLI exit-code boundary: configuration and input
/// validation problems are user errors (exit 2), while IO and file-format
/// problems are environment errors (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("dimension error in {context}: {msg}")]
    Shape { context: String, msg: String },

    #[error("aggregation error for client {client}: {msg}")]
    Aggregation { client: usize, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn shape(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            msg: msg.into(),
        }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for validation errors, 3 for IO/format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Shape { .. } | Error::Aggregation { .. } => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
