use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite velocity at integration step {step}")]
    NonFiniteVelocity { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures caused by bad or missing data on disk.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint { .. }
        )
    }

    /// True for divergence and other numerical breakdowns.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NonFiniteVelocity { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
