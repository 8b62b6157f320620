use std::path::PathBuf;

use satr_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("format error in {}: {detail}", file.display())]
    Format { file: PathBuf, detail: String },

    #[error("sensitivity is undefined: the detection set has no ground-truth boxes")]
    UndefinedSensitivity,

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CoreError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub(crate) fn format(file: impl Into<PathBuf>, detail: impl ToString) -> Self {
        CoreError::Format { file: file.into(), detail: detail.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
