use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A cell or field could not be parsed. Row and column are 1-based
    /// positions in the source file (row 1 is the header).
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    /// Structurally valid input that violates a data contract
    /// (duplicate ids, ragged rows, misaligned vectors).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// An argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data integrity,
    /// 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::Domain(_)
            | Error::Io { .. }
            | Error::Csv(_) => 2,
        }
    }
}
