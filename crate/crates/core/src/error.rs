use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("degenerate normalization range: lo={lo} hi={hi}")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("value {value} outside the allowed range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("image too small: {height}x{width} (need at least 2x2)")]
    TooSmall { height: usize, width: usize },
    #[error("bad range for {name}: [{lo}, {hi}]")]
    BadRange { name: &'static str, lo: f64, hi: f64 },
    #[error("invalid remap spec: {0}")]
    InvalidSpec(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss is not finite")]
    DivergedTraining { step: usize },
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("both masks are empty")]
    BothEmpty,
    #[error("mask is empty")]
    EmptyMask,
    #[error("evaluation region is empty")]
    EmptyRegion,
    #[error("all alignment scores are identical; correlation is undefined")]
    DegenerateScores,
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end. Each error kind
    /// maps to its own nonzero value.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadConfig(_) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } | Error::Json(_) => 4,
            Error::NonFiniteInput => 10,
            Error::DegenerateRange { .. } => 11,
            Error::OutOfRange { .. } => 12,
            Error::ShapeMismatch { .. } => 13,
            Error::TooSmall { .. } => 14,
            Error::BadRange { .. } => 15,
            Error::InvalidSpec(_) => 16,
            Error::EmptyDataset => 17,
            Error::DivergedTraining { .. } => 18,
            Error::NonFiniteLoss { .. } => 19,
            Error::BothEmpty => 20,
            Error::EmptyMask => 21,
            Error::EmptyRegion => 22,
            Error::DegenerateScores => 23,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
