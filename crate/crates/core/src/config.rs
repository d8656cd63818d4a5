// SPDX-License-Identifier: Apache-2.0

//! Simulation parameters: seeds, device latency models and KMS settings.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::device_sim::LatencyModel;
use crate::kms::KmsConfig;

/// Latency model id used for KMS key verification steps.
pub const KMS_MODEL_ID: &str = "kms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Wall seconds slept per simulated second.
    pub time_scale: f64,
    pub latency_models: Vec<LatencyModel>,
    #[serde(default)]
    pub kms: KmsConfig,
    /// How long an operation waits in the configuration queue.
    #[serde(default = "default_lock_timeout")]
    pub lock_timeout_s: f64,
}

fn default_lock_timeout() -> f64 {
    600.0
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {path}: {message}")]
    Schema { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config: cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl SimConfig {
    /// The calibrated defaults shipped in `data/default.config.json`.
    pub fn calibrated_default() -> SimConfig {
        SimConfig::from_json(crate::scenarios::DEFAULT_CONFIG_JSON).expect("shipped config is valid")
    }

    pub fn from_json(document: &str) -> Result<SimConfig, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(document);
        let config: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<SimConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        SimConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.time_scale >= 0.0) {
            return Err(ConfigError::Invalid(format!("time_scale {} must be >= 0", self.time_scale)));
        }
        if !(self.lock_timeout_s > 0.0) {
            return Err(ConfigError::Invalid("lock_timeout_s must be > 0".into()));
        }
        for m in &self.latency_models {
            m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !self.latency_models.iter().any(|m| m.id == KMS_MODEL_ID) {
            return Err(ConfigError::Invalid(format!("missing latency model {KMS_MODEL_ID:?}")));
        }
        Ok(())
    }

    pub fn lock_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.lock_timeout_s)
    }

    /// Same parameters with every latency model replaced by a constant.
    pub fn with_constant_latency(mut self, value_s: f64) -> SimConfig {
        self.latency_models = self
            .latency_models
            .iter()
            .map(|m| LatencyModel::constant(m.id.clone(), value_s))
            .collect();
        self
    }
}
