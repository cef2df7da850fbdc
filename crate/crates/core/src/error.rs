use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient synthetic pool: need {needed} items, pool holds {available} (short by {})", needed - available)]
    InsufficientPool { needed: usize, available: usize },
    #[error("missing HER2 subtypes in recall set: {0:?}")]
    MissingSubtypes(Vec<String>),
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss {
        step: u64,
        term: String,
        snapshot: Box<crate::diagnostics::BatchSnapshot>,
    },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] histosynth_tensor::TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
