use thiserror::Error;

/// Errors produced by the translation core.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("index {index} out of range 0..={max} in {context}")]
    OutOfRange {
        context: &'static str,
        index: usize,
        max: usize,
    },

    /// A loss, latent or prediction became NaN or infinite.
    #[error("non-finite value in {stage} at step {step}")]
    NonFinite { stage: String, step: usize },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(stage: impl Into<String>, step: usize) -> Self {
        Error::NonFinite {
            stage: stage.into(),
            step,
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
