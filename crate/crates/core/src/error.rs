use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dispersion undefined for {n} artifacts (need at least 2)")]
    UndefinedDispersion { n: usize },

    #[error("protocol setup error: no pairwise seed for nodes {0} and {1}")]
    MissingPairwiseSeed(u32, u32),

    #[error("round {round} aborted: seed for dropped node {node} is unrecoverable")]
    AbortRound { round: u64, node: u32 },

    #[error("secure aggregation over an empty set of live shares")]
    EmptyAggregate,

    #[error("protocol violation: duplicate node tag {0}")]
    DuplicateNodeTag(String),

    #[error("file error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed trace: {0}")]
    Trace(String),

    #[error("malformed transcript: {0}")]
    Transcript(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::DimensionMismatch { .. } => "config",
            Error::UndefinedDispersion { .. } => "dispersion",
            Error::MissingPairwiseSeed(..) => "protocol-setup",
            Error::AbortRound { .. } => "abort-round",
            Error::EmptyAggregate => "empty-aggregate",
            Error::DuplicateNodeTag(_) => "protocol-violation",
            Error::Io { .. } => "file",
            Error::Trace(_) => "trace",
            Error::Transcript(_) | Error::Json(_) => "transcript",
        }
    }
}
