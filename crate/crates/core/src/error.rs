use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown {kind} id: {id}")]
    UnknownId { kind: &'static str, id: String },

    #[error("{malformed} malformed lines out of {total} in {path} exceeds threshold")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("no interactions")]
    NoInteractions,

    #[error("no query derivable for product {0}")]
    NoQuery(String),

    #[error("user {user_id} has {count} logs, at least 2 required")]
    TooFewLogs { user_id: String, count: usize },

    #[error("template {template}: {message}")]
    Template { template: String, message: String },

    #[error("rendered prompt has {len} chars, budget is {budget}")]
    PromptTooLong { len: usize, budget: usize },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("missing decision token: {0}")]
    MissingDecisionToken(&'static str),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("missing embedding for {0}")]
    MissingEmbedding(String),

    #[error("missing embedding store")]
    MissingStore,

    #[error("empty summary")]
    EmptySummary,

    #[error("generation missing marker {0}")]
    MissingMarker(&'static str),

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("{0}")]
    Sampling(String),

    #[error("empty test split")]
    EmptyTestSplit,

    #[error("baseline value for {0} is zero")]
    ZeroBaseline(String),

    #[error("stale artifact {path}: hash does not match manifest")]
    StaleArtifact { path: PathBuf },

    #[error("step {step} failed")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }
}
