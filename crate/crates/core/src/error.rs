use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op} received a non-finite input")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not recorded on a tape")]
    NotOnTape,

    #[error("tensors from different tapes cannot be combined")]
    TapeMismatch,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("k = {k} must lie in 1..={n}")]
    InvalidK { k: usize, n: usize },

    #[error("every logit is masked out")]
    AllMasked,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampled inference needs a random generator")]
    MissingRng,

    #[error("{0} is not supported here")]
    Unsupported(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("inconsistent load statistics: {0}")]
    InconsistentStats(String),

    #[error("expert count {n} exceeds the enumeration limit {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
