use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("embeddings come from different feature maps ({0:#x} vs {1:#x})")]
    MapMismatch(u64, u64),

    #[error("model variant mismatch: model is {model}, input is {input}")]
    VariantMismatch {
        model: &'static str,
        input: &'static str,
    },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("all ABC weights underflowed to zero at epsilon = {epsilon:e}; increase epsilon")]
    WeightUnderflow { epsilon: f64 },

    #[error("ill-conditioned regression design: {0}")]
    IllConditioned(String),

    #[error("simulation diverged: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
