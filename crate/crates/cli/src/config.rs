//! The run configuration file: model dims, pretraining and adapter training
//! hyperparameters, and the toy visual encoder seed.

use std::path::Path;

use anyhow::{Context, Result};
use padapt::adapter::AdapterConfig;
use padapt::backbone::{BackboneConfig, PretrainConfig};
use padapt::trainer::JointTrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: JointTrainConfig,
    #[serde(default = "default_encoder_seed")]
    pub encoder_seed: u64,
}

fn default_encoder_seed() -> u64 {
    7
}

impl RunConfig {
    /// The desk-scale setup used for all experiments.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            adapter: AdapterConfig::desk(),
            pretrain: PretrainConfig {
                steps: 600,
                ..PretrainConfig::default()
            },
            train: JointTrainConfig {
                caption_lr: 1e-2,
                instruction_lr: 3e-3,
                steps: 3000,
                seed: 5,
                ..JointTrainConfig::default()
            },
            encoder_seed: default_encoder_seed(),
        }
    }

    /// LLaMA-7B dims, for parameter accounting.
    pub fn llama7b() -> Self {
        Self {
            backbone: BackboneConfig::llama7b(),
            adapter: AdapterConfig::llama7b(),
            pretrain: PretrainConfig::default(),
            train: JointTrainConfig::default(),
            encoder_seed: default_encoder_seed(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "llama7b" => Some(Self::llama7b()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate(&self.backbone)?;
        self.train.validate()?;
        Ok(())
    }
}
