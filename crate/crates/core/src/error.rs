use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("annihilator unavailable: {0}")]
    AnnihilatorUnavailable(String),

    #[error("brute-force enumeration too large: {count} candidates exceeds limit {limit}")]
    OracleTooLarge { count: u128, limit: u128 },

    #[error("bound inapplicable: {0}")]
    BoundInapplicable(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate prior: {0}")]
    PriorDegenerate(String),

    #[error("infeasible prior: {0}")]
    InfeasiblePrior(String),

    #[error("invalid observer gain: {0}")]
    InvalidGain(String),

    #[error("network reduction failed: {0}")]
    Reduction(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Parse(_)
                | Error::DimensionMismatch(_)
                | Error::InvalidModel(_)
                | Error::Domain(_)
                | Error::Io(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
