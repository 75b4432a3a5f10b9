//! Shared error type for the toolkit.

use std::path::PathBuf;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// missing input file -> 2, format/config/argument -> 3, consistency -> 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (vocab file, JSONL record, feature file header).
    #[error("format error: {0}")]
    Format(String),

    /// A structurally valid input that violates a configuration requirement,
    /// e.g. a vocabulary without all five special tokens.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside its documented domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// Artifacts built against different vocabularies (content-hash mismatch).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// The masked set is empty; the caller omits the masking loss term.
    #[error("empty mask: no positions to predict")]
    EmptyMask,

    /// A gradient check hit a non-finite intermediate at the given input
    /// tensor and flat coordinate.
    #[error("non-finite value during gradient check at input {input}, coordinate {coordinate}")]
    NonFinite { input: usize, coordinate: usize },

    /// A training loop produced a non-finite loss and aborted.
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
