use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    MalformedManifest { line: usize, message: String },

    #[error("duplicate image id {0:?}")]
    DuplicateId(String),

    #[error("feature file {path} for record {id:?} is missing")]
    MissingFeatureFile { id: String, path: PathBuf },

    #[error("bad magic in feature file (expected \"XMRG\")")]
    BadMagic,

    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid feature header: {0}")]
    InvalidHeader(String),

    #[error("feature payload size mismatch: header implies {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("decomposition produced no subqueries")]
    NoSubqueries,

    #[error("could not parse decomposition completion: {reason}; completion was {completion:?}")]
    CompletionParse { reason: String, completion: String },

    #[error("embedding row count {rows} does not match subquery count {subqueries}")]
    EmbeddingCount { rows: usize, subqueries: usize },

    #[error("embedding row {0} is the zero vector")]
    ZeroEmbedding(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced in adapter stage {0}")]
    NonFiniteStage(&'static str),

    #[error("vector is not unit norm (norm = {0})")]
    NotUnitNorm(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("subquery {0:?} has no embedding attached")]
    MissingEmbedding(String),

    #[error("generation prompt would be empty: no retrieved image satisfies any subquery")]
    EmptyPrompt,

    #[error("transport error: {0}")]
    Transport(String),

    #[error("service rejected request: {0}")]
    Rejected(String),

    #[error("adapter parameter file: {0}")]
    ParamFile(String),

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

    /// True for failures talking to an external service (LLM or image generator).
    pub fn is_external(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Rejected(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
