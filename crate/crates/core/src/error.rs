use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("non-finite value at ({row}, {col}) in {matrix}")]
    NonFinite {
        matrix: String,
        row: usize,
        col: usize,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("configuration error for `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("AUC undefined: input contains a single class")]
    AucUndefined,

    #[error("event {event}: {source}")]
    InEvent {
        event: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<crate::params::ModelParams>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_event(self, event: usize) -> Self {
        match self {
            e @ Error::InEvent { .. } => e,
            e => Error::InEvent {
                event,
                source: Box::new(e),
            },
        }
    }

    /// Whether the error originates from user configuration rather than
    /// data or numerics. The CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::InEvent { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
