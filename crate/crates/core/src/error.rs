use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file contents; `offset` is the byte position where decoding failed.
    #[error("decode error at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    /// Values violating an image or stack invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Value outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input that leaves nothing to compute on (e.g. every pixel masked out).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the message with a stage or location label, keeping the variant.
    pub fn context(self, label: impl std::fmt::Display) -> Self {
        match self {
            Error::Decode { offset, msg } => Error::Decode {
                offset,
                msg: format!("{label}: {msg}"),
            },
            Error::Validation(m) => Error::Validation(format!("{label}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{label}: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("{label}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{label}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{label}: {m}")),
            io @ Error::Io { .. } => io,
        }
    }
}
