use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Domain(String),

    #[error("series truncated at {terms} terms leaves tail mass {tail:e} above tolerance {tol:e}")]
    Truncation { terms: usize, tail: f64, tol: f64 },

    #[error("characteristic function overflow at lambda={lambda}, kappa={kappa}, tau={tau}: {detail}")]
    Overflow {
        lambda: f64,
        kappa: f64,
        tau: f64,
        detail: String,
    },

    #[error("cash dividend {dividend} is too large for grid node price {price}")]
    DividendTooLarge { dividend: f64, price: f64 },

    #[error("Fourier grid violates Nyquist bound: step {step} exceeds {bound}")]
    Nyquist { step: f64, bound: f64 },

    #[error("negative kernel mass {clipped:e} exceeds {limit:e} of row mass")]
    Ringing { clipped: f64, limit: f64 },

    #[error("spot {spot} is outside the grid interior [{lo}, {hi}]")]
    OutsideGrid { spot: f64, lo: f64, hi: f64 },

    #[error("strike {0} falls on a grid node")]
    StrikeOnNode(f64),

    #[error("no implied volatility: {0}")]
    NoSolution(String),

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True when the failure comes from bad input rather than from the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Schema(_)
                | Error::Io(_)
                | Error::Unsupported(_)
                | Error::StrikeOnNode(_)
                | Error::OutsideGrid { .. }
                | Error::DividendTooLarge { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
