use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Variants are grouped by the module
/// contract that raises them so CLI messages can name the failing module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("embedstore: schema error: {0}")]
    Schema(String),

    #[error("embedstore: malformed file: {0}")]
    Format(String),

    #[error("embedstore: invalid data: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("subspace: Gram matrix W^T W + eps*I is singular (eps = {epsilon})")]
    SingularGram { epsilon: f64 },

    #[error("zero-norm feature vector")]
    ZeroFeature,

    #[error("encoder: text feature for class {class} has zero norm before normalization")]
    DegenerateTextFeature { class: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("losses: empty batch")]
    EmptyBatch,

    #[error("metrics: empty {0} set")]
    EmptySet(&'static str),

    #[error("numerical error in {term}: {detail}")]
    Numerical { term: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad invocation rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
