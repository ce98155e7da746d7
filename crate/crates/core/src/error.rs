use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad, missing or inconsistent input data.
    Data,
    /// Invalid parameters or pipeline configuration.
    Config,
    /// A numerical quantity is degenerate (vanishing mass, tiny scale, ...).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("{file}: expected {expected} bytes ({field}), found {actual}")]
    SizeMismatch {
        file: String,
        field: String,
        expected: u64,
        actual: u64,
    },

    #[error("{file}: sha256 mismatch (manifest {expected}, computed {actual})")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("labels[{index}] = {label} is outside [0, {k})")]
    LabelOutOfRange { index: usize, label: u32, k: usize },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset has no classifier head (weights + bias); {0}")]
    MissingHead(&'static str),

    #[error("dataset has neither features+head nor logits")]
    NoLogitSource,

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid calibrator: {0}")]
    InvalidCalibrator(String),

    #[error("empty group: {0}")]
    EmptyGroup(&'static str),

    #[error("numerically degenerate: {0}")]
    Degenerate(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_)
            | Error::InvalidSplit(_)
            | Error::InvalidCalibrator(_)
            | Error::MissingHead(_) => ErrorClass::Config,
            Error::Degenerate(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
