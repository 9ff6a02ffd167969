//! Experiment configuration: one TOML file with a `[simulation]` and a
//! `[filter]` table, both optional. Key names mirror the library structs.

use std::fs;
use std::path::Path;

use avio::fusion::FilterConfig;
use avio::sim::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub simulation: SimConfig,
    pub filter: FilterConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|(key, message)| CliError::Config { path: path.to_path_buf(), key, message })
    }

    /// Parses and validates; errors carry the offending key path.
    pub fn parse(text: &str) -> Result<Self, (String, String)> {
        let de = toml::Deserializer::parse(text).map_err(|e| ("<document>".to_string(), e.message().to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            (key, e.into_inner().message().to_string())
        })?;
        config.simulation.validate().map_err(|(k, m)| (format!("simulation.{k}"), m))?;
        config.filter.validate().map_err(|e| ("filter".to_string(), e.to_string()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is representable in TOML")
    }
}
