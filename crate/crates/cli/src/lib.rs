//! Experiment harness for token pruning: configuration, training and sweep
//! orchestration, CSV reports and token-map rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod render;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, Result};
