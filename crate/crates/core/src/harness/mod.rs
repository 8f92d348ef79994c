//! End-to-end experiment orchestration: synthetic data, the pipeline,
//! run artifacts and reports.

pub mod artifacts;
pub mod config;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod synthetic;

pub use config::RunConfig;
pub use models::FittedModel;
pub use pipeline::{evaluate, run_experiment, Experiment, ExperimentReport};
pub use report::emit_report;
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};
