use thiserror::Error;

/// Errors raised by tensor construction, tape operations and serialization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
