use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor operations and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Failures while reading datasets, adjacency files, or checkpoints.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file is empty")]
    Empty { path: PathBuf },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    Ragged {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: cannot parse {token:?} as a number")]
    NotNumeric {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}:{line}: negative case count {value}")]
    Negative {
        path: PathBuf,
        line: usize,
        value: f64,
    },
    #[error("adjacency must be {expected}x{expected}, found {rows}x{cols}")]
    AdjacencyShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("adjacency entry ({row},{col}) = {value} is not 0 or 1")]
    AdjacencyValue { row: usize, col: usize, value: f64 },
    #[error("segment {segment} has {len} steps, needs at least {needed} for window {window} and horizon {horizon}")]
    SegmentTooShort {
        segment: &'static str,
        len: usize,
        needed: usize,
        window: usize,
        horizon: usize,
    },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadSplit([f64; 3]),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Errors from configuring or running a model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("numerical failure at epoch {epoch}: {source}")]
    Numerical {
        epoch: usize,
        #[source]
        source: TensorError,
    },
}

impl ModelError {
    /// True when the failure came from a NaN/Inf in the forward or backward pass.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ModelError::Numerical { .. } | ModelError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
