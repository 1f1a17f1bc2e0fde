use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid law: {0}")]
    InvalidLaw(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("fading gain must be positive, got {0}")]
    NonPositiveGain(f64),

    #[error("power for pair (rate {rate}, gain {gain}) re-derived as {rederived}, first assigned {assigned}")]
    InconsistentRederivation {
        rate: f64,
        gain: f64,
        assigned: f64,
        rederived: f64,
    },

    #[error("negative power {power} for user {user} at rate {rate}")]
    NegativePower { user: usize, rate: f64, power: f64 },

    #[error("no power assigned for user {user} at rate {rate}, gain {gain}")]
    MissingPower { user: usize, rate: f64, gain: f64 },

    #[error("value iteration did not converge in {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("invalid action {action} for state {state:?}: {reason}")]
    InvalidAction {
        state: Vec<f64>,
        action: f64,
        reason: &'static str,
    },

    #[error("policy chain is not a single recurrent class: {0}")]
    ReducibleChain(String),

    #[error("average sum-power increased from {previous} to {current} at iteration {iteration}")]
    NonMonotone {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
