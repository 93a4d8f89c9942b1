//! Experiment harness for `fedllm-core`: synthetic data, protocol runs with
//! baselines, reports and run artifacts.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, ArmReport, ExperimentOutcome};
pub use manifest::RunManifest;
