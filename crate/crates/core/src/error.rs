use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameters that cannot work together (bad K, lambda, mismatched tables, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Data that violates an operation's preconditions (non-finite values, wrong dimension, bad label).
    #[error("input error: {0}")]
    Input(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was read but its content is not a valid record.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Failure inside one replicate of an experiment.
    #[error("replicate {index}: {source}")]
    Replicate {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed CSV row {row} in {path}: {message}")]
    CsvRow {
        path: PathBuf,
        row: u64,
        message: String,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end:
    /// 1 for configuration-type problems, 2 for anything touching files.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::CsvRow { .. } => 2,
            Error::Replicate { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
