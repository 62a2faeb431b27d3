use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("negative variance {0}")]
    NegativeVariance(f64),

    #[error("non-positive uncertainty {0}")]
    NonPositiveUncertainty(f64),

    #[error("degenerate box: zero width or height")]
    DegenerateBox,

    #[error("unknown class {0}")]
    UnknownClass(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("infeasible scene geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("merge error: {0}")]
    Merge(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
