//! Configuration, presets and experiment orchestration.

pub mod config;
pub mod presets;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{execute, run_experiment, sweep, with_threads, RunOutput, SweepParam};
