//! Experiment driver for the ddnz denoising toolkit.

pub mod config;
pub mod error;
pub mod methods;
pub mod pipeline;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
pub use methods::Method;
pub use pipeline::{Pipeline, StageOutcome};
