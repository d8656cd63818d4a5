// SPDX-License-Identifier: Apache-2.0

//! Service configuration, read from the file named by `QSLICE_CONFIG`.

use std::path::{Path, PathBuf};

use qslice_core::config::ConfigError;
use qslice_core::topology::{load_topology_file, TopologyError};
use qslice_core::{scenarios, Orchestrator, OrchestratorError, SimConfig, Topology};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "QSLICE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Topology file; the shipped testbed when absent. Relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub topology_path: Option<PathBuf>,
    #[serde(default = "SimConfig::calibrated_default")]
    pub simulation: SimConfig,
    /// Origin allowed to call the API from a browser.
    #[serde(default)]
    pub cors_origin: Option<String>,
    /// Mounts the `/test/*` endpoints.
    #[serde(default)]
    pub enable_test_endpoints: bool,
    /// When set, every request except `/health` needs `Authorization: Bearer <token>`.
    #[serde(default)]
    pub bearer_token: Option<String>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: default_listen(),
            topology_path: None,
            simulation: SimConfig::calibrated_default(),
            cors_origin: None,
            enable_test_endpoints: false,
            bearer_token: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("reading {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Simulation(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

impl ServiceConfig {
    pub fn from_json(document: &str) -> Result<Self, ServiceConfigError> {
        let de = &mut serde_json::Deserializer::from_str(document);
        let config: ServiceConfig = serde_path_to_error::deserialize(de).map_err(|e| ServiceConfigError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.simulation.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ServiceConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ServiceConfigError::Io(path.into(), e))?;
        let mut config = Self::from_json(&text)?;
        if let (Some(t), Some(dir)) = (&config.topology_path, path.parent()) {
            if t.is_relative() {
                config.topology_path = Some(dir.join(t));
            }
        }
        Ok(config)
    }

    /// The file named by `QSLICE_CONFIG`, or defaults when it is unset.
    pub fn from_env() -> Result<Self, ServiceConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(path) => Self::from_file(PathBuf::from(path)),
            None => Ok(Self::default()),
        }
    }

    pub fn topology(&self) -> Result<Topology, ServiceConfigError> {
        match &self.topology_path {
            Some(p) => Ok(load_topology_file(p)?),
            None => Ok(scenarios::testbed_topology()),
        }
    }

    pub fn orchestrator(&self) -> Result<Orchestrator, ServiceConfigError> {
        Ok(Orchestrator::new(self.topology()?, self.simulation.clone())?)
    }
}
