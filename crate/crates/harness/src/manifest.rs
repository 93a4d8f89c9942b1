use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub plan: u64,
    pub dataset: u64,
    pub model: u64,
    pub server_model: u64,
    pub teachers: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Hex SHA-256 of the canonical config bytes.
    pub config_hash: String,
    pub seeds: Seeds,
    pub version: String,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.canonical_bytes()))
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            name: cfg.name.clone(),
            config_hash: config_hash(cfg),
            seeds: Seeds {
                plan: cfg.plan.seed,
                dataset: cfg.dataset.seed,
                model: cfg.model.seed,
                server_model: cfg.server_model.seed,
                teachers: cfg.hetero.teachers.iter().map(|t| t.seed).collect(),
            },
            version: format!("fedllm {}", env!("CARGO_PKG_VERSION")),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::json(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_eq!(config_hash(&a).len(), 64);
        let b = ExperimentConfig { name: "other".into(), ..a.clone() };
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
