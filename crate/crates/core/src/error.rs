use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Local DP needs at least one reporting unit per hierarchy level.
    #[error("insufficient population: {units} reporting units for a hierarchy of height {height}")]
    InsufficientPopulation { units: usize, height: u32 },

    /// A ratio estimate whose (noisy) denominator is not positive.
    #[error(transparent)]
    Degenerate(#[from] DegenerateEstimate),
}

pub type Result<T> = std::result::Result<T, Error>;

/// A ratio that cannot be formed because its estimated denominator is
/// not positive. Carries the raw counters so callers can log them.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("degenerate {what}: numerator {numerator}, denominator {denominator}")]
pub struct DegenerateEstimate {
    pub what: &'static str,
    pub numerator: f64,
    pub denominator: f64,
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
