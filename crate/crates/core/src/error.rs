use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmbError>;

#[derive(Debug, Error)]
pub enum CmbError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("coupling singularity: |psi_b| = {value:e} below {eps:e} at position {position:?}")]
    Singularity {
        /// (batch, channel, row, col) of the offending divisor entry.
        position: [usize; 4],
        value: f64,
        eps: f64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CmbError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CmbError::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmbError::Io {
            path: path.into(),
            source,
        }
    }
}
