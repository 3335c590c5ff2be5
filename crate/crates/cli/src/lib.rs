//! Library side of the `fedpart` command: config schema, runner, tuning.

pub mod config;
pub mod runner;
pub mod tune;

pub use config::{ExperimentConfig, Manifest};
pub use runner::{replay, run, MetricRecord, RunReport};
pub use tune::{tune, TuneReport};
