use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a structural precondition (dimensions, one-hot vectors, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// The RB assignment has more selected users than resource blocks.
    #[error("infeasible assignment: {users} selected users for {rbs} resource blocks")]
    Infeasible { users: usize, rbs: usize },

    /// Instance too large for exhaustive enumeration.
    #[error("brute force guard: {users} users exceeds the limit of {limit}")]
    TooLarge { users: usize, limit: usize },

    /// Malformed input data (IDX files, checkpoints, traces).
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Invalid or missing dataset.
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A round of the experiment loop failed.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Data(_) => 3,
            Error::Round { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
