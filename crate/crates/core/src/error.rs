use thiserror::Error;

use crate::tensor::Shape;

/// Errors raised by tensor kernels, the tape and the sparse executor.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        got: Shape,
    },
    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tensor data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("row count mismatch in {op}: expected {expected}, got {got}")]
    RowCount {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("output row {row} is outside the gathered set of {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("in-image neighbour of gathered row {row} (tap {tap}) is missing from the dilated gather")]
    MissingNeighbor { row: usize, tap: usize },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
