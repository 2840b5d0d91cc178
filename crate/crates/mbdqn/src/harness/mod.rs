//! Experiment harness: config parsing, metric emission, run orchestration,
//! and a runtime self-check suite.

pub mod check;
pub mod config;
pub mod metrics;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Agent(#[from] crate::agent::AgentError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error(transparent)]
    Replay(#[from] crate::replay::ReplayError),
    #[error(transparent)]
    Approx(#[from] crate::approximator::ApproxError),
    #[error(transparent)]
    Returns(#[from] crate::returns::ReturnError),
}

pub use check::{run_checks, CheckResult};
pub use config::{ConfigMap, EnvSpec, RunConfig};
pub use metrics::{EvalRow, RunMetrics, VisitationMap};
pub use run::{run_comparison, run_paired, run_training, train_seed, ComparisonSummary, SeedOutcome};
