use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("rollout diverged at step {step}: state became non-finite")]
    RolloutDiverged { step: usize },
    #[error("covariance in {0} is not invertible")]
    SingularCovariance(&'static str),
    #[error("covariance lost symmetry beyond tolerance in {context} (max asymmetry {asymmetry:e})")]
    AsymmetricCovariance {
        context: &'static str,
        asymmetry: f64,
    },
    #[error("Q_uu not positive definite after {retries} eta-doubling retries")]
    QuuNotPositiveDefinite { retries: usize },
    #[error("dual bracketing failed: no eta bracket found in {0} expansions")]
    DualBracketNotFound(usize),
    #[error("need at least {need} trajectories, got {got}")]
    TooFewTrajectories { need: usize, got: usize },
    #[error("cluster count {k} exceeds trajectory count {m}")]
    TooManyClusters { k: usize, m: usize },
    #[error("supervised training diverged after {0} learning-rate restarts")]
    TrainingDiverged(usize),
    #[error("{failed} of {total} local-policy solves failed (first: {first}); aborting iteration")]
    TooManyLocalFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("policy file error: {0}")]
    PolicyFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
