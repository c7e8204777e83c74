use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation's precondition.
    #[error("{op}: {why}")]
    Contract { op: &'static str, why: String },

    /// Threshold metrics need at least one score from each class.
    #[error("{0}: scores must contain both classes")]
    SingleClass(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] morphguard_tensor::TensorError),
}

impl CoreError {
    pub fn contract(op: &'static str, why: impl Into<String>) -> Self {
        CoreError::Contract { op, why: why.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
