use std::path::PathBuf;

use thiserror::Error;

use crate::kspace::Domain;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("expected a {expected:?}-domain array, got {found:?}")]
    WrongDomain { expected: Domain, found: Domain },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(
        "infeasible mask parameters: {center_lines} center lines exceed the budget of {budget:.2} lines"
    )]
    InfeasibleMask { center_lines: usize, budget: f64 },

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("data consistency weight must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("epoch must be non-negative, got {0}")]
    NegativeEpoch(f64),

    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
