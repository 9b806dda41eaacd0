//! Experiment harness: configuration, the meta-training loop, evaluation
//! with confidence intervals, learning-rate search, sweeps and reporting.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod output;
pub mod run;
pub mod stats;
pub mod sweep;

pub use config::ExperimentConfig;
pub use output::{run_experiment, ResultRow, Summary};
pub use run::{evaluate, train, Evaluation, RunRecord, TrainOutcome};
