use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("activation record does not match this network")]
    ActivationMismatch,

    #[error("non-finite {what} in layer {layer}")]
    NonFinite { layer: String, what: &'static str },

    #[error("class {0} has no samples in the training split")]
    EmptyClass(String),

    /// Input is too degenerate for the operation to be meaningful
    /// (flat histogram, single-class labels, empty tissue mask, ...).
    #[error("{0}")]
    Degenerate(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("stage '{stage}' requires '{missing}' (produced by stage '{produced_by}'); run that stage first")]
    MissingArtifact {
        stage: String,
        missing: PathBuf,
        produced_by: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
