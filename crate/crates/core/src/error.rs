use thiserror::Error;

use crate::precision::PrecisionLevel;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("cannot cast {from} values down to the finer level {to}")]
    CastToFiner {
        from: PrecisionLevel,
        to: PrecisionLevel,
    },

    #[error("cannot cast {from} values up to the coarser level {to}")]
    CastToCoarser {
        from: PrecisionLevel,
        to: PrecisionLevel,
    },

    #[error("matrix is singular at {level} precision (pivot {pivot:e} in column {column})")]
    Singular {
        level: PrecisionLevel,
        column: usize,
        pivot: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("grid size {0} is too small, at least 4 points are required")]
    GridTooSmall(usize),

    #[error("water depth {value:e} at node {index} is below the positivity guard")]
    DepthGuard { index: usize, value: f64 },

    #[error("non-finite values produced by the {0} precision solve")]
    Overflow(PrecisionLevel),

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("reference run diverged at t = {0}")]
    ReferenceDiverged(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
