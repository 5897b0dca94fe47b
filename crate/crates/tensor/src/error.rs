use thiserror::Error;

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value produced by {layer}")]
    Numeric { layer: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),

    #[error("weight file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EngineError {
    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
