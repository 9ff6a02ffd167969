//! File formats and commands behind the `avio` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
pub mod report;
pub mod table;

pub use config::ExperimentConfig;
pub use error::CliError;
