use thiserror::Error;

/// Errors raised by the numerical routines and file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside the interval on which the operation is defined.
    #[error("{what} = {value} is outside {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    /// A signal level cannot be reached by the target schedule.
    #[error("alpha = {alpha} is outside the schedule range [{lo}, {hi}]")]
    Range { alpha: f64, lo: f64, hi: f64 },

    /// Grid sides, channel counts or level counts do not fit together.
    #[error("size error: {0}")]
    Size(String),

    /// An argument is structurally invalid (empty lists, zero counts, mismatched weights).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A schedule description violates its invariants.
    #[error("invalid schedule: {0}")]
    Schedule(String),

    /// A binary grid file is malformed.
    #[error("malformed grid data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(what: &'static str, value: f64, domain: impl Into<String>) -> Error {
    Error::Domain {
        what,
        value,
        domain: domain.into(),
    }
}
