//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the numeric kernels, the training loop and the file codecs.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A caller-supplied value violates a precondition (empty input, zero count, bad rate).
    InvalidArgument(String),
    /// Matrix or vector shapes cannot be combined.
    Dimension(String),
    /// A numeric domain violation (non-positive variance, non-finite value).
    Domain(String),
    /// An operation was invoked with stale or missing retained state.
    State(String),
    /// Inconsistent configuration across artifacts (vocab mismatch, bad mode).
    Config(String),
    /// A structured text file failed to parse.
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    /// Filesystem failure while reading or writing an artifact.
    Io { path: String, message: String },
    /// A persisted artifact carries an unsupported format version.
    VersionMismatch { expected: String, got: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse {
                path,
                line,
                message,
            } => write!(f, "parse error in {path} at line {line}: {message}"),
            Error::Io { path, message } => write!(f, "io error on {path}: {message}"),
            Error::VersionMismatch { expected, got } => {
                write!(
                    f,
                    "version mismatch: expected {expected}, got {got}; regenerate the artifact"
                )
            }
        }
    }
}

impl std::error::Error for Error {}
