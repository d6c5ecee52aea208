use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("image `{image_id}` has feature dimension {actual}, corpus dimension is {expected}")]
    FeatureDimension {
        image_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("no feature vector for image `{0}`")]
    MissingFeature(String),

    #[error("no reference questions for image `{0}`")]
    MissingReferences(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("vocabulary is empty after applying min_count={0}")]
    EmptyVocabulary(usize),

    #[error("split `{0}` would be empty although its ratio is positive")]
    EmptySplit(&'static str),

    #[error("enumeration of {0} sequences exceeds the 1e6 guard")]
    EnumerationTooLarge(f64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }
}
