use std::path::PathBuf;

use thiserror::Error;

use crate::fxp::FxpError;
use crate::io::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Fxp(#[from] FxpError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("network severed: layer `{layer}` has no surviving output channels")]
    NetworkSevered { layer: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error(transparent)]
    FormatBytes(#[from] FormatError),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for bad inputs
    /// (files, formats, configuration), 1 for compute-contract violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Format { .. }
            | Error::FormatBytes(_)
            | Error::Config { .. }
            | Error::InvalidArgument(_) => 2,
            Error::Fxp(_) | Error::Shape(_) | Error::NetworkSevered { .. } => 1,
        }
    }
}
