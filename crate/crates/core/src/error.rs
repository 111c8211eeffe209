use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum TempoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("no rows")]
    NoRows,

    #[error("parse error at row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("ragged row {row}: expected {expected} cells, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

impl TempoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TempoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TempoError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::TempoError::InvalidArgument(format!($($arg)*))
    };
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::TempoError::Shape(format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
