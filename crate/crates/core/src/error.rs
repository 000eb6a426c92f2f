use thiserror::Error;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the domain of a function (negative time, t > T, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed or inconsistent user input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Numerical failure during a computation.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("degenerate convexity at K={strike}, T={maturity}: d2C/dK2={d2c_dk2:e}")]
    DegenerateConvexity {
        strike: f64,
        maturity: f64,
        d2c_dk2: f64,
    },

    #[error("negative local variance {variance:e} at K={strike}, T={maturity} (butterfly arbitrage)")]
    NegativeVariance {
        strike: f64,
        maturity: f64,
        variance: f64,
    },

    #[error("density mass drifted to {mass} at t={time} (tolerance {tolerance:e})")]
    MassDrift { time: f64, mass: f64, tolerance: f64 },

    #[error("no samples within bandwidth {bandwidth} of K={strike}")]
    EmptyBin { strike: f64, bandwidth: f64 },

    #[error("conditional expectation {value:e} below floor at K={strike}, t={maturity}")]
    DegenerateDenominator { strike: f64, maturity: f64, value: f64 },

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration, as opposed to
    /// numerical failures during a run.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Domain(_)
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn ensure_finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(format!("{name} must be finite, got {x}")))
    }
}
