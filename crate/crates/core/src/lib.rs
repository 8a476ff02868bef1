//! Reset-free guided policy search on stochastic toy control systems.
//!
//! The training loop alternates four stages: on-policy sampling from the
//! global network policy, hard-EM clustering of the rollouts into Gaussian
//! trajectory distributions, KL-constrained LQR solves that produce one
//! local policy per sample, and supervised distillation of those local
//! policies back into the network. A classic fixed-reset MDGPS loop is
//! included as a comparison baseline.
//!
//! Modules map onto the stages:
//! - [`env`]: toy environments, rollouts, analytic costs
//! - [`lingauss`]: linear-Gaussian trajectory math (marginals, KL,
//!   expected cost, log-densities)
//! - [`dynfit`]: time-varying linear-Gaussian system identification with
//!   an optional GMM prior
//! - [`cluster`]: hard-EM trajectory clustering
//! - [`cphase`]: cost expansion, KL-constrained backward pass, dual
//!   search, step-size rule
//! - [`sphase`]: the global network policy and its supervised training
//! - [`driver`]: the full training loops, evaluation, and run artifacts
//! - [`config`]: the TOML run configuration

pub mod cluster;
pub mod config;
pub mod cphase;
pub mod driver;
pub mod dynfit;
pub mod env;
pub mod error;
pub mod lingauss;
pub mod math;
pub mod rng;
pub mod sphase;

pub use config::RunConfig;
pub use driver::{evaluate_policy, run, run_classic_mdgps, run_reset_free, TrainingReport};
pub use error::{Error, Result};
