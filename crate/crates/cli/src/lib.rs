//! Experiment harness: config files, instance generation, seeded parallel
//! replications and CSV/JSON output.

pub mod config;
pub mod error;
pub mod instance;
pub mod runner;

pub use config::{ExperimentConfig, LoadedConfig};
pub use error::CliError;
pub use instance::{generate_instance, Instance, InstanceError};
pub use runner::{prepare, run_experiment, run_policy, ExperimentReport, Prepared};
