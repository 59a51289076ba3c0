use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("worker {0} has an empty shard")]
    EmptyShard(usize),

    #[error("partition sizes sum to {actual}, dataset has {expected} samples")]
    PartitionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot select {requested} workers out of {available}")]
    Selection { requested: usize, available: usize },

    #[error("missing update norm for worker {0}")]
    MissingNorm(usize),

    #[error("expected {expected} uploads, got {actual}")]
    Cardinality { expected: usize, actual: usize },

    #[error("training diverged at round {round} on worker {worker}")]
    Divergence { round: usize, worker: usize },

    #[error("c = {c} is outside the admissible range (0, {upper})")]
    InvalidC { c: f64, upper: f64 },

    #[error("malformed IDX data: {0}")]
    Idx(String),

    #[error("malformed trace file: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
