use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
