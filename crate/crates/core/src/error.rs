use std::path::PathBuf;

use thiserror::Error;

use crate::storage::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("degenerate training data: {0}")]
    Degenerate(String),

    #[error("trial {index} ({enroll} {test}): embedding `{id}` not found")]
    UnresolvedId {
        index: usize,
        enroll: String,
        test: String,
        id: String,
    },

    #[error("no uncertainty present in embedding archive")]
    NoUncertainty,

    #[error("score set has no {0} trials")]
    MissingClass(&'static str),

    #[error("score set contains {0} trials with unknown labels")]
    UnknownLabels(usize),

    #[error("cannot length-scale a zero vector (embedding `{0}`)")]
    ZeroVector(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
