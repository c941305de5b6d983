use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown relation identifier `{0}`")]
    UnknownRelation(String),

    #[error("invalid dialogue {id}: {message}")]
    InvalidDialogue { id: String, message: String },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("negative pool too small: need {required}, have {available}")]
    PoolTooSmall { required: usize, available: usize },

    #[error("sequence too long: {len} tokens exceeds limit {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing weights: {0}")]
    MissingWeights(String),

    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("gold trigger span unavailable for query {0}")]
    MissingGoldSpan(String),

    #[error("missing gold relations for query {0}")]
    MissingGold(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("non-finite loss at epoch {epoch}, step {step}: trigger={trigger}, binary={binary}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        trigger: f64,
        binary: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid synthetic spec: {0}")]
    Synth(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "json",
            Error::UnknownRelation(_) => "unknown_relation",
            Error::InvalidDialogue { .. } => "invalid_dialogue",
            Error::InvalidSplit(_) => "invalid_split",
            Error::PoolTooSmall { .. } => "pool_too_small",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::Shape(_) => "shape",
            Error::MissingWeights(_) => "missing_weights",
            Error::InvalidSpan(_) => "invalid_span",
            Error::MissingGoldSpan(_) => "missing_gold_span",
            Error::MissingGold(_) => "missing_gold",
            Error::Config(_) => "config",
            Error::EmptyTrainingSet => "empty_training_set",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Synth(_) => "synth",
        }
    }
}
