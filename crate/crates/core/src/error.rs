use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The observational structure of a row is inconsistent (e.g. outcome
    /// recorded for a censored row).
    #[error("row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("expected {expected} feature columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Positivity failure surfaced by cross-fitting: a training complement
    /// has no complete cases in one treatment arm.
    #[error("fold {fold}: no complete cases in treatment arm {arm} outside the fold")]
    EmptyArm { fold: usize, arm: u8 },

    #[error("step {step}: empty at-risk set")]
    EmptyRiskSet { step: usize },

    #[error("no effective observations for targeting")]
    NoEffectiveObservations,

    #[error("all stacked-ensemble candidates failed to fit")]
    AllCandidatesFailed,

    #[error("all seed runs failed; last error: {0}")]
    AllSeedsFailed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by malformed input or configuration rather than by
    /// the estimation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::InvalidArgument(_)
        )
    }
}
