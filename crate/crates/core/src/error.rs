use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("cannot split {n} items into {k} nonempty parts")]
    TooManyParts { n: u64, k: u64 },

    #[error("{what} refused for n = {n} (limit {limit})")]
    TooLarge { what: &'static str, n: u64, limit: u64 },

    #[error("length mismatch: partition covers {expected} individuals, got {actual} outcomes")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("(omega, pi) is not attainable at n = {n}, k = {k}")]
    Unattainable { n: u64, k: u64 },

    #[error(
        "unresolvable event: estimated probability {probability:.3e} needs at least {min_trials:.3e} trials, got {trials}"
    )]
    UnresolvableEvent {
        probability: f64,
        min_trials: f64,
        trials: u64,
    },

    #[error("worker pool: {0}")]
    Workers(String),
}

pub type Result<T> = std::result::Result<T, Error>;
