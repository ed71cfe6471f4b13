use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes disagree. `context` names the layer or argument.
    #[error("shape mismatch at {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("optimization diverged at iteration {iteration}: energy {energy:e}")]
    Divergence { iteration: usize, energy: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerics or IO.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::InvalidArgument(_) | Error::Empty(_) | Error::Format(_)
        )
    }
}
