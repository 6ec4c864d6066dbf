//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands disagree in shape; both shapes are carried in the message.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Operands disagree in element type (real vs complex).
    DtypeMismatch { op: &'static str },
    /// A precondition on an argument failed.
    InvalidArgument { op: &'static str, message: String },
    /// `backward` was called on a value that is not a real scalar.
    NotScalarLoss { shape: Vec<usize> },
    /// Training aborted because the loss left the finite range.
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A serialized artifact (AFNT file, config, checkpoint) failed to parse.
    Format { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::DtypeMismatch { op } => write!(f, "{op}: real/complex dtype mismatch"),
            Error::InvalidArgument { op, message } => write!(f, "{op}: {message}"),
            Error::NotScalarLoss { shape } => {
                write!(f, "backward: loss must be a real scalar, got shape {shape:?}")
            }
            Error::NonFiniteLoss {
                step,
                lr,
                grad_norm,
            } => write!(
                f,
                "training aborted: non-finite loss at step {step} (lr={lr:e}, grad_norm={grad_norm:e})"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format { message } => write!(f, "format error: {message}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        message: message.into(),
    }
}
