use std::path::PathBuf;

use crate::synthdata::Modality;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents did not parse.
    #[error("malformed file {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("no centroid for identity {identity} in modality {modality:?}")]
    MissingCentroid { identity: u32, modality: Modality },

    #[error("negative selection failed: {0}")]
    Selection(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("finite-difference oracle produced a non-finite value at coordinate {index}")]
    Oracle { index: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("fingerprint mismatch for {what}: expected {expected}, found {found}")]
    Fingerprint {
        what: String,
        expected: String,
        found: String,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
