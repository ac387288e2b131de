use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("iteration limit reached after {iterations} iterations (last residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },

    #[error("criterion mismatch: {0}")]
    CriterionMismatch(String),

    #[error("policy selects infeasible action {action} at state {state}")]
    PolicyInvalid { state: usize, action: usize },

    #[error("tolerance error: {0}")]
    Tolerance(String),

    #[error("simulation error: policy undefined at state {state}")]
    Simulation { state: usize },
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
