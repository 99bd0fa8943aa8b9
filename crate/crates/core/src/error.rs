use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor data length does not match the product of its extents.
    DataLength { expected: usize, actual: usize },
    /// A zero extent, or a rank the operation does not accept.
    BadShape { op: &'static str, shape: Vec<usize> },
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    NonFinite { op: &'static str },
    EmptyTensor { op: &'static str },
    InvalidArgument { op: &'static str, reason: String },
    /// The variable does not belong to the tape it was used with.
    UnknownVar { id: usize },
    NotScalar { shape: Vec<usize> },
    BoundaryLossUnsupported,
    /// A training run produced a non-finite loss.
    Diverged {
        step: u64,
        total: f64,
        bce: f64,
        dice: f64,
        cl_dice: f64,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { expected, actual } => {
                write!(f, "tensor data has {actual} values, shape requires {expected}")
            }
            Error::BadShape { op, shape } => write!(f, "{op}: unsupported shape {shape:?}"),
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::EmptyTensor { op } => write!(f, "{op}: empty tensor"),
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::UnknownVar { id } => write!(f, "variable {id} is not on this tape"),
            Error::NotScalar { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::BoundaryLossUnsupported => {
                f.write_str("boundary loss unsupported: lambda_bd must be 0")
            }
            Error::Diverged {
                step,
                total,
                bce,
                dice,
                cl_dice,
            } => write!(
                f,
                "non-finite loss at step {step}: total={total} bce={bce} dice={dice} cl_dice={cl_dice}"
            ),
        }
    }
}

impl core::error::Error for Error {}
