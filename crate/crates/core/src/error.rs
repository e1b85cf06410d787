use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The normalizer `b_inf · B(a,o) · b` vanished: the model considers the
    /// action-observation pair impossible from this state.
    #[error("degenerate state update: normalizer {denominator:e} for action {action}")]
    DegenerateUpdate { action: usize, denominator: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("trajectory too short: need {needed} pairs, got {got}")]
    EmptyOutput { needed: usize, got: usize },

    #[error("no training samples for actions {0:?}")]
    MissingAction(Vec<usize>),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("insufficient samples for action {action}: need {needed}, got {got}")]
    InsufficientSamples { action: usize, needed: usize, got: usize },

    #[error("problem too large for exact value iteration: {0}")]
    SizeLimit(String),

    #[error("goal unreachable from start pose")]
    Unreachable,

    #[error("feature map mismatch: {0}")]
    FeatureMapMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::InvalidArgument(_)
                | Error::EmptyOutput { .. }
                | Error::MissingAction(_)
                | Error::InsufficientSamples { .. }
                | Error::SizeLimit(_)
                | Error::FeatureMapMismatch(_)
                | Error::Format(_)
        )
    }
}
