use std::fmt;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: `Config`/`Dim`/`Contract`
/// are usage errors (exit 1), `Numeric` is divergence (exit 2), `Io`/`Parse`
/// are I/O failures (exit 3).
#[derive(Debug)]
pub enum Error {
    /// Shape disagreement between tensors, names both shapes.
    Dim(String),
    /// A precondition of an operation was violated.
    Contract(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// Malformed on-disk data; `offset` is the byte position of the problem.
    Parse { offset: u64, msg: String },
    /// Filesystem failure, message includes the path.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Parse { offset, msg } => write!(f, "parse error at byte {offset}: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Attach a path to an io error so messages name the file involved.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(format!("{}: {e}", path.display()))
    }
}
