use thiserror::Error;

/// Errors raised by mechanism configuration, data validation and I/O.
#[derive(Debug, Error)]
pub enum DpError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("Gumbel noise requires eps1 == eps2 (got {eps1} and {eps2})")]
    GumbelBudgetMismatch { eps1: f64, eps2: f64 },

    #[error("value {value} at position {index} lies below the lower bound {lower}")]
    BelowLowerBound { index: usize, value: f64, lower: f64 },

    #[error("value {value} at position {index} lies outside the range [{lo}, {hi}]")]
    OutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("query sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("outcome index {k} out of range 1..={len}")]
    OutcomeOutOfRange { k: usize, len: usize },

    #[error("{trials} trials is below the minimum {required} for the requested confidence")]
    InsufficientTrials { trials: usize, required: usize },

    #[error("lower bound required but not declared")]
    MissingLowerBound,

    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}: cannot parse `{text}` as a number")]
    Parse { row: usize, text: String },

    #[error("unknown verification suite `{0}`")]
    UnknownSuite(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DpError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> DpError {
    DpError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {value}")))
    }
}

pub(crate) fn require_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(name, format!("must lie in [0, 1], got {value}")))
    }
}
