use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced or received non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input text. `line` is 1-based; 0 when the location is unknown.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A file could not be read or written.
    #[error("io error: {0}")]
    Io(String),

    /// Stored data refers to a basis that does not match the one expected.
    #[error("basis mapping error: {0}")]
    BasisMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: msg.into(),
    }
}
