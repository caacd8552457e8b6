use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GemError>;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("lexicon validation failed for {path}: {problems:?}")]
    LexiconValidation { path: String, problems: Vec<String> },

    #[error("stratum {stratum:?} has {count} items; at least 3 are required to split")]
    Stratification { stratum: String, count: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged (NaN loss) at step {step}")]
    NanLoss { step: u64 },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GemError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GemError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        GemError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
