//! Config-driven experiments over the contraction-certified control stack:
//! verification reports, rollouts, training and parameter sweeps.
//!
//! Every output is a deterministic function of the config and seed.

// Guards such as `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod plot;
pub mod report;
pub mod setup;

use thiserror::Error;

pub use config::ExperimentConfig;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(_) => EXIT_CHECK_FAILED,
            _ => EXIT_USAGE,
        }
    }
}

impl From<contraction_core::envs::EnvError> for CliError {
    fn from(e: contraction_core::envs::EnvError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<contraction_core::trainer::TrainError> for CliError {
    fn from(e: contraction_core::trainer::TrainError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<contraction_core::verifier::VerifierError> for CliError {
    fn from(e: contraction_core::verifier::VerifierError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<contraction_core::policy::PolicyError> for CliError {
    fn from(e: contraction_core::policy::PolicyError) -> Self {
        CliError::Run(e.to_string())
    }
}
