//! Dense matrices and a small reverse-mode autodiff tape.

mod matrix;
mod optim;
mod tape;

use thiserror::Error;

pub use matrix::{Matrix, Scalar};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use tape::{cross_entropy, softmax_rows, Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("buffer of length {len} cannot back a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("backward root must be 1x1, got {}x{}", shape.0, shape.1)]
    NonScalarRoot { shape: (usize, usize) },
    #[error("tape already traversed; reset before reuse")]
    StaleTape,
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{params} parameters but {grads} gradients")]
    ParamCount { params: usize, grads: usize },
    #[error("row index {index} is outside 0..{rows}")]
    RowOutOfRange { index: usize, rows: usize },
}
