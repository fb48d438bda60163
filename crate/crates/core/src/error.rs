//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data source error at {path}: {reason}")]
    DataSource { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model load error: {0}")]
    ModelLoad(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    TrainingDivergence { epoch: usize, step: usize, loss: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
