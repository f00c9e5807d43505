use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories shared by every module.
///
/// The CLI maps these onto its exit codes, so the split between
/// argument-like, numeric and I/O failures matters.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension(String),
    /// A caller-supplied parameter is out of range.
    Argument(String),
    /// A loaded or constructed object violates a structural invariant.
    Validation(String),
    /// A file is not an LFCK container of a supported version.
    Format(String),
    /// Missing or inconsistent configuration (e.g. a predictor for a family).
    Config(String),
    /// NaN or infinity appeared where finite values are required.
    Numeric(String),
    /// An iterative method did not converge.
    Convergence(String),
    Io(io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io_msg(kind: io::ErrorKind, msg: impl Into<String>) -> Self {
        Error::Io(io::Error::new(kind, msg.into()))
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Argument(_)
            | Error::Validation(_)
            | Error::Format(_)
            | Error::Config(_) => 2,
            Error::Numeric(_) | Error::Convergence(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Convergence(m) => write!(f, "convergence error: {m}"),
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Format(e.to_string())
        }
    }
}
