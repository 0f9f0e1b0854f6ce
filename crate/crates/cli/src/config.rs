use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use tracebox_core::chat::EndpointConfig;
use tracebox_service::ServiceConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Model under evaluation.
    pub model: Option<EndpointConfig>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            max_retries: 2,
            backoff_ms: 500,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
