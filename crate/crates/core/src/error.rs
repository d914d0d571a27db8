use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Dim(String),
    /// A forward or backward pass produced a non-finite value.
    Numeric(String),
    /// An argument is outside its documented domain.
    Argument(String),
    /// An operation was invoked in a state it does not support.
    State(String),
    /// A region of interest projects to zero feature cells.
    DegenerateRoi(String),
    /// A network configuration cannot be realized; names the offending layer.
    Config(String),
    /// Training produced a non-finite loss at the given step.
    Training { step: usize, message: String },
    /// A text file on disk does not match the expected format.
    Format { line: usize, message: String },
    /// A model file is corrupt or has the wrong magic/version/checksum.
    ModelFile(String),
    /// No proposal cleared the detection probability floor.
    NoDetection,
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::DegenerateRoi(m) => write!(f, "degenerate RoI: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Training { step, message } => {
                write!(f, "training error at step {step}: {message}")
            }
            Error::Format { line, message } => write!(f, "format error at line {line}: {message}"),
            Error::ModelFile(m) => write!(f, "model file error: {m}"),
            Error::NoDetection => write!(f, "no eye region detected above the probability floor"),
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

/// Prefixes the offending path onto an io error, keeping its kind.
pub fn io_with_path(e: io::Error, path: &std::path::Path) -> io::Error {
    io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}
