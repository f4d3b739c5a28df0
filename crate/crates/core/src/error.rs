use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "degenerate factor: square-root argument {value:e} at position {index} is not positive"
    )]
    DegenerateFactor { index: usize, value: f64 },

    #[error(
        "correlation {rho} is outside the admissible range (0 < |rho| < {bound}) for length {len}"
    )]
    InvalidRho { rho: f64, bound: f64, len: usize },

    #[error("invalid scale parameter: {0}")]
    InvalidScale(String),

    #[error("every mean must be nonzero, found 0 at position {0}")]
    ZeroMean(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward pass requested before a forward pass")]
    MissingForward,

    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        index: Vec<usize>,
        shape: Vec<usize>,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite loss {loss} at iteration {iteration}: {detail}")]
    NonFinite {
        iteration: u64,
        loss: f64,
        detail: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: truncated record ({len} bytes is not a multiple of {record})")]
    TruncatedRecord {
        path: PathBuf,
        len: usize,
        record: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
