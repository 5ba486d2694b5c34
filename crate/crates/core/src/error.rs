use std::fmt;
use std::io;

/// Crate-wide error type. Each variant maps to a stable CLI exit-code
/// category via [`Error::category_code`].
#[derive(Debug)]
pub enum Error {
    /// Tensor/raster shape mismatch; message names the offending shapes.
    Shape(String),
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// A configuration the code deliberately does not support (e.g. a
    /// non-x2 upconvolution factor).
    Unsupported(String),
    /// A loss had no contributing pixels; the caller must skip the batch.
    DegenerateLoss(String),
    /// Non-finite values showed up in gradients or losses.
    TrainingDiverged(String),
    /// Invalid run/model configuration; message names the violated constraint.
    Config(String),
    /// Malformed input file; `offset` is the byte position where parsing failed.
    Parse { path: String, offset: usize, msg: String },
    /// Data content violates a contract (e.g. out-of-range class label).
    Data(String),
    /// Checkpoint corruption (bad magic, CRC mismatch, truncation).
    Checkpoint(String),
    Io(io::Error),
}

impl Error {
    /// Stable exit-code category used by the CLI (0 is success).
    pub fn category_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Unsupported(_) => 3,
            Error::Parse { .. } => 4,
            Error::Io(_) => 5,
            Error::Checkpoint(_) => 6,
            Error::DegenerateLoss(_) => 7,
            Error::TrainingDiverged(_) => 8,
            Error::Data(_) => 9,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported configuration: {m}"),
            Error::DegenerateLoss(m) => write!(f, "degenerate loss: {m}"),
            Error::TrainingDiverged(m) => write!(f, "training diverged: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Parse { path, offset, msg } => {
                write!(f, "parse error in {path} at byte {offset}: {msg}")
            }
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
