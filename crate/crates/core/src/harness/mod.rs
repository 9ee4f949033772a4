//! Data simulation, experiment presets and the command-line front end.

pub mod cli;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use data::{simulate, Dataset, FunctionTag};
pub use experiment::{preset, run_experiment, ExperimentConfig, ModelSetup, PredictionRecord, Summary};
pub use metrics::{metrics, Metrics};
