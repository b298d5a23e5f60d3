use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid layer dimensions {0:?}: need at least two positive entries")]
    InvalidDims(Vec<usize>),

    #[error("input has dimension {got}, model expects {expected}")]
    InputDim { expected: usize, got: usize },

    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("{0}")]
    Format(String),

    #[error("unsupported version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("expected {expected} target vectors of dimension {dim}, got {got}")]
    MissingTarget { expected: usize, dim: usize, got: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("no candidate for sample {sample} in class {class} after excluding the sample itself")]
    EmptyPool { sample: usize, class: usize },

    #[error("store does not match dataset: {0}")]
    StoreMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
