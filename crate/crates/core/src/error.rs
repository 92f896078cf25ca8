use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("alignment mismatch: {tokens} tokens but {pos} POS tags")]
    Alignment { tokens: usize, pos: usize },

    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown phonetic segment {0:?}")]
    UnknownSegment(String),

    #[error("word {word:?} missing from {table}")]
    MissingWord { word: String, table: &'static str },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("rank-deficient design: dependent columns {0:?}")]
    RankDeficient(Vec<String>),

    #[error("separation: coefficients diverge ({0})")]
    Separation(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("model comparison: {0}")]
    Comparison(String),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
