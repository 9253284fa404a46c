use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("node pair ({v}, {w}) is invalid for n = {n}")]
    InvalidPair { v: usize, w: usize, n: usize },

    #[error("observation budget exhausted ({total} observations used)")]
    BudgetExhausted { total: u64 },

    #[error("budget too small: {0}")]
    BudgetTooSmall(String),

    #[error("trimming removed every node")]
    EmptyTrimmedSet,

    #[error("eigensolver did not converge after {iterations} Lanczos steps (residual {residual:.3e}, tolerance {tolerance:.3e})")]
    EigenNoConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate rate estimates: p_hat = {p_hat}, q_hat = {q_hat}")]
    DegenerateEstimates { p_hat: f64, q_hat: f64 },

    #[error("cluster count mismatch: estimate has K = {estimate}, truth has K = {truth}")]
    ClusterCountMismatch { estimate: usize, truth: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than by an algorithm
    /// failing on valid input.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParams(_)
                | Error::InvalidPair { .. }
                | Error::BudgetTooSmall(_)
                | Error::ClusterCountMismatch { .. }
                | Error::Parse(_)
                | Error::Io(_)
        )
    }
}
