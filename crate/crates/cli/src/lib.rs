//! Command-line front end: bitstream format, encode/decode/train/eval
//! commands and exit-code mapping.

pub mod bitstream;
pub mod commands;

use vnsc::VnscError;
use vnsc_tensor::TensorError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Process exit code for a failed command.
pub fn exit_code(err: &VnscError) -> u8 {
    match err {
        VnscError::Usage(_) | VnscError::Config(_) => EXIT_USAGE,
        VnscError::Alignment { .. }
        | VnscError::Format(_)
        | VnscError::TruncatedPayload { .. }
        | VnscError::Wav(_)
        | VnscError::Io(_) => EXIT_FORMAT,
        VnscError::NonFinite { .. } => EXIT_NUMERICAL,
        VnscError::Tensor(t) => match t {
            TensorError::Format(_)
            | TensorError::Io(_)
            | TensorError::MissingParameter(_)
            | TensorError::DuplicateParameter(_) => EXIT_FORMAT,
            _ => EXIT_NUMERICAL,
        },
    }
}
