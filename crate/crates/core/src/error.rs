use thiserror::Error;
use vnsc_tensor::TensorError;

#[derive(Debug, Error)]
pub enum VnscError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("alignment error: {what} has {found} frames, expected {expected}")]
    Alignment {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bits, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("numerical failure: {term} is {value}")]
    NonFinite { term: &'static str, value: f64 },

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VnscError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> VnscError {
    VnscError::Config(msg.into())
}
