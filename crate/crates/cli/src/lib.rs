//! Orchestration for noisy-reverberant voice conversion experiments:
//! configuration, the condition matrix and the command-line surface.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::{default_conditions, ConditionSpec, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentReport, RunOutcome};
