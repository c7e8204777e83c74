use thiserror::Error;

/// Errors surfaced by tensor construction, graph ops, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: shape {shape:?} is invalid here: {why}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },

    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },

    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{0}")]
    Invalid(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("file truncated at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
