use thiserror::Error;

/// Errors raised by the library. The CLI maps `Config`/`Usage` to exit code 1
/// and everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("insufficient data: need at least {needed} tokens, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("invalid time pair: need 0 <= s < t <= 1, got s={s}, t={t}")]
    InvalidTimePair { s: f64, t: f64 },

    #[error("soft input weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },

    #[error("invalid soft input: {0}")]
    InvalidSoftInput(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("time argument mismatch: model time_conditioned={conditioned}, time supplied={supplied}")]
    TimeArgument { conditioned: bool, supplied: bool },

    #[error("degenerate distribution: no probability mass on candidate tokens")]
    DegenerateDistribution,

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("entropy lower bound must be negative, got {0}")]
    InvalidLowerBound(f64),

    #[error("empty nucleus after excluding the mask token")]
    EmptyNucleus,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Whether this is an operator error (bad config or flags) rather than a
    /// runtime or numerical failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
