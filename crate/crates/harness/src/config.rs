//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedllm_core::trainers::{Protocol, TrainerPlan};
use fedllm_core::{AdapterSpec, LoraSpec, ModelConfig, OptimizerConfig};

use crate::corpus::DatasetSpec;
use crate::error::{HarnessError, Result};

/// Environment variable that replaces every seed in a config.
pub const SEED_ENV: &str = "FLLM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Baselines {
    /// Adapter tuning on the union of all client data.
    pub centralized: bool,
    /// Adapter tuning on each client's shard alone.
    pub local_only: bool,
}

impl Default for Baselines {
    fn default() -> Self {
        Self { centralized: true, local_only: true }
    }
}

/// Full-parameter training of base models on the public topics before any
/// federated work, so adapters start from a model with some structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 16, optimizer: desk_optimizer(0.05) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Held-out prompts scored with ROUGE/BLEU; perplexity uses the whole test set.
    pub generation_samples: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { generation_samples: 16, max_new_tokens: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkSpec {
    pub n_bits: usize,
    pub gamma: f64,
    pub threshold: f64,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        Self {
            n_bits: 64,
            gamma: fedllm_core::fedipr::DEFAULT_GAMMA,
            threshold: fedllm_core::fedipr::DEFAULT_THRESHOLD,
        }
    }
}

/// Private models for the heterogeneous protocol, one per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeteroSpec {
    pub teachers: Vec<ModelConfig>,
    /// Full-parameter epochs each teacher trains on its own shard.
    pub teacher_epochs: usize,
}

impl Default for HeteroSpec {
    fn default() -> Self {
        let base = ModelConfig::default();
        Self {
            teachers: vec![
                ModelConfig { seed: 101, ..base },
                ModelConfig { d_model: 96, n_heads: 4, d_ff: 384, seed: 102, ..base },
            ],
            teacher_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Client-side model (the mentee architecture for the heterogeneous protocol).
    pub model: ModelConfig,
    /// The larger server model for co-tuning and offsite-tuning.
    pub server_model: ModelConfig,
    pub adapter: AdapterSpec,
    pub plan: TrainerPlan,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainSpec,
    pub hetero: HeteroSpec,
    /// Run the federated arm; `false` leaves only the baselines.
    pub federated: bool,
    pub baselines: Baselines,
    pub eval: EvalSpec,
    pub watermark: Option<WatermarkSpec>,
    /// Defaults to `runs/<name>` when absent.
    pub output_dir: Option<PathBuf>,
}

fn desk_optimizer(lr: f64) -> OptimizerConfig {
    OptimizerConfig { lr, momentum: Some(0.9), clip_norm: Some(1.0) }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            name: "desk".into(),
            model,
            server_model: ModelConfig { n_layers: 6, seed: 7, ..model },
            adapter: AdapterSpec::Lora(LoraSpec::default()),
            plan: TrainerPlan { optimizer: desk_optimizer(0.1), ..TrainerPlan::default() },
            dataset: DatasetSpec::default(),
            pretrain: PretrainSpec::default(),
            hetero: HeteroSpec::default(),
            federated: true,
            baselines: Baselines::default(),
            eval: EvalSpec::default(),
            watermark: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::json("experiment config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::json(path.display().to_string(), e))
    }

    /// Applies [`SEED_ENV`] when it is set.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v} is not a u64")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    /// Replaces every seed with ones derived from `seed`, keeping distinct
    /// models distinct.
    pub fn with_seed(mut self, seed: u64) -> Self {
        use fedllm_core::trainers::derive_seed;
        self.plan.seed = seed;
        self.dataset.seed = derive_seed(seed, &[1]);
        self.model.seed = derive_seed(seed, &[2]);
        self.server_model.seed = derive_seed(seed, &[3]);
        for (i, t) in self.hetero.teachers.iter_mut().enumerate() {
            t.seed = derive_seed(seed, &[4, i as u64]);
        }
        self
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        self.dataset.validate()?;
        match &self.adapter {
            AdapterSpec::Lora(s) => s.validate(&self.model)?,
            AdapterSpec::Prefix(s) => s.validate(&self.model)?,
        }
        let longest = crate::corpus::max_sample_len();
        if self.dataset.pairs_file.is_none() && longest > self.model.max_seq_len {
            return Err(HarnessError::Config(format!(
                "corpus samples reach {longest} tokens but max_seq_len is {}",
                self.model.max_seq_len
            )));
        }
        match self.plan.protocol {
            Protocol::Co | Protocol::Ost => {
                self.server_model.validate()?;
                if self.server_model.vocab_size != self.model.vocab_size {
                    return Err(HarnessError::Config("server and client models must share a vocabulary".into()));
                }
            }
            Protocol::Hetero => {
                if self.hetero.teachers.len() != self.dataset.num_clients {
                    return Err(HarnessError::Config(format!(
                        "{} teacher models for {} clients",
                        self.hetero.teachers.len(),
                        self.dataset.num_clients
                    )));
                }
                for t in &self.hetero.teachers {
                    t.validate()?;
                }
            }
            Protocol::Homo => {}
        }
        if let Some(w) = &self.watermark {
            if w.n_bits == 0 || !(0.0..=1.0).contains(&w.threshold) {
                return Err(HarnessError::Config("watermark needs n_bits ≥ 1 and a threshold in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Canonical bytes: JSON with sorted keys and no whitespace.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("config is plain data");
        serde_json::to_vec(&value).expect("value serializes")
    }
}
