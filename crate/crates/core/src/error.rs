use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the explanation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("class {class} has no rows in the training split")]
    ClassMissingInTrain { class: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("tree {tree} splits on {features} distinct features, exceeding the enumeration bound of {limit}")]
    TooManyFeatures {
        tree: usize,
        features: usize,
        limit: usize,
    },

    #[error("k = {k} exceeds the {available} available rows")]
    KTooLarge { k: usize, available: usize },

    #[error("median of the training {what} is zero; the difficulty estimate is undefined")]
    DegenerateMedian { what: String },

    #[error("class {class} has {rows} rows; at least 2 are needed to fit a covariance")]
    ClassTooSmall { class: usize, rows: usize },

    #[error("{available} calibration scores are too few for significance {epsilon} (need {required})")]
    CalibrationTooSmall {
        available: usize,
        required: usize,
        epsilon: f64,
    },

    #[error("significance level {0} was not calibrated")]
    NotCalibrated(f64),

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("no critical value tabulated for {k} methods at alpha {alpha}")]
    UnsupportedK { k: usize, alpha: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_width(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
