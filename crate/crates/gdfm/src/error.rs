use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("channel matrix is rank deficient: rank {rank} < {need} outcomes")]
    RankDeficient { rank: usize, need: usize },

    #[error("inconsistent recovery: residual {residual:.3e} exceeds tolerance")]
    Inconsistent { residual: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown action id {0}")]
    UnknownAction(u32),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("events out of order at t={at:.6}: previous t={prev:.6}")]
    EventOrder { prev: f64, at: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stream format at line {line}: {message}")]
    StreamFormat { line: u64, message: String },

    #[error("zero anchor gap: pretrain and oracle metrics coincide")]
    ZeroAnchorGap,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), message: message.into() }
    }
}
