use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds context window of {max} tokens")]
    ContextOverflow { len: usize, max: usize },

    #[error("budget {budget} is outside [0, {max}]")]
    BudgetOutOfRange { budget: usize, max: usize },

    #[error("invalid skip set: {0}")]
    InvalidSkipSet(String),

    #[error("logits contain non-finite values")]
    NonFiniteLogits,

    #[error("template error in stage `{stage}`: {msg}")]
    Template { stage: String, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no budget reaches the target accuracy {target:.4}")]
    Infeasible { target: f64 },

    #[error("{path}: line {line}: {msg}")]
    DatasetLine { path: PathBuf, line: usize, msg: String },

    #[error("record `{id}`: {msg}")]
    InvalidRecord { id: String, msg: String },

    #[error("weight container: {0}")]
    Weights(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by user input (bad files, flags, configs) rather than bugs.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLogits)
    }
}
