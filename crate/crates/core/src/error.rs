use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] sparsepatch_numcore::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {what} at byte {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: u64,
        msg: String,
    },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u8 },
    #[error("degenerate {0}")]
    Degenerate(&'static str),
    #[error("invalid {what}: {msg}")]
    Validation { what: &'static str, msg: String },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numerical,
    Validation,
}

impl Error {
    pub fn validation(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Validation { what, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numeric(e) if e.is_numerical() => ErrorKind::Numerical,
            Error::Degenerate(_) => ErrorKind::Numerical,
            Error::Io { .. } | Error::Parse { .. } | Error::Truncated { .. } | Error::UnsupportedVersion { .. } => {
                ErrorKind::Io
            }
            Error::Config { .. } => ErrorKind::Usage,
            Error::Numeric(_) | Error::Validation { .. } => ErrorKind::Validation,
        }
    }
}
