use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Contract(_) | Error::Shape(_) => 2,
            Error::Numeric(_) | Error::NonFinite { .. } | Error::Metric(_) => 3,
            Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 4,
        }
    }
}
