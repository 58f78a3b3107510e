//! Experiment driver: JSON configuration, seeded parallel sweeps, CSV output
//! and log–log rate fits.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod stats;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
