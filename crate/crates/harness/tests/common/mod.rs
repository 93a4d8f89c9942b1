#![allow(dead_code)]

use std::path::Path;

use fedllm_core::OptimizerConfig;
use fedllm_harness::config::{Baselines, EvalSpec, PretrainSpec};
use fedllm_harness::corpus::DatasetSpec;
use fedllm_harness::ExperimentConfig;

/// A config small enough to run in a few seconds.
pub fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "tiny".into(),
        dataset: DatasetSpec { samples: 96, test_per_client: 12, public_samples: 96, proxy_samples: 32, ..DatasetSpec::default() },
        pretrain: PretrainSpec { epochs: 1, ..PretrainSpec::default() },
        eval: EvalSpec { generation_samples: 2, max_new_tokens: 12 },
        output_dir: Some(dir.to_path_buf()),
        ..ExperimentConfig::default()
    };
    cfg.plan.rounds = 2;
    cfg.plan.batch_size = 8;
    cfg
}

pub fn no_baselines() -> Baselines {
    Baselines { centralized: false, local_only: false }
}

pub fn sgd(lr: f64) -> OptimizerConfig {
    OptimizerConfig { lr, momentum: Some(0.9), clip_norm: Some(1.0) }
}
