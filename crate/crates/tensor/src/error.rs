use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Config {
        op,
        detail: detail.into(),
    }
}
