use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HintsError> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum HintsError {
    #[error("csv column `{0}` not found in header")]
    MissingColumn(String),
    /// Row is the 1-based data row (header excluded), col the 1-based file column.
    #[error("non-numeric or non-finite cell at row {row}, column {col}: {value:?}")]
    NonNumericCell { row: usize, col: usize, value: String },
    #[error("csv file has no data rows")]
    EmptyFile,
    #[error("series of length {len} too short for lookback {lookback} + horizon {horizon}")]
    SeriesTooShort { len: usize, lookback: usize, horizon: usize },
    #[error("variable {0} is constant on the fitting range")]
    ConstantVariable(usize),
    #[error("series of length {len} too short for seasonal period {period} (need at least 2 periods)")]
    PeriodTooLarge { len: usize, period: usize },
    #[error("variable {0} has zero-variance residuals")]
    DegenerateVariable(usize),
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("test split produced no windows")]
    EmptyTestSet,
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("usage error in `{key}`: {message}")]
    Usage { key: String, message: String },
    #[error("conflicting configuration: {first} vs {second}: {message}")]
    ConfigConflict {
        first: String,
        second: String,
        message: String,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HintsError {
    pub fn kind(&self) -> ErrorKind {
        use HintsError::*;
        match self {
            Usage { .. } | ConfigConflict { .. } | InvalidArgument(_) => ErrorKind::Usage,
            Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HintsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        HintsError::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
