use thiserror::Error;

/// Errors shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// All raw weights are zero, so no normalization exists. Unreachable with
    /// clamped reference probabilities; kept for the defensive API surface.
    #[error("degenerate weights: raw weights sum to zero")]
    DegenerateWeights,

    #[error("numeric failure at {context}: {detail}")]
    NumericFailure { context: String, detail: String },

    #[error("incompatible tokenizer: {0}")]
    IncompatibleTokenizer(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
