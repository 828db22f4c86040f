//! Experiment configuration: one JSON document with a required `version`.
//! Unknown keys are rejected and every violation names the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datagen::DataConfig;
use crate::error::{Error, Result};
use crate::evaluator::{EvalTrainConfig, ModelConfig};
use crate::generator::{GenerationConfig, GumbelConfig};
use crate::oracle::DEFAULT_CAP;
use crate::reward::RewardConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Named generator-training variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Train on raw neighbor rewards instead of rewards relative to the origin.
    #[serde(rename = "no-relative-reward")]
    NoRelativeReward,
    /// Drop the position-distribution loss (alpha = 0).
    #[serde(rename = "no-L2")]
    NoL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Largest permutation space the oracle will enumerate.
    pub cap: usize,
    /// Test records to benchmark; all when unset.
    pub records: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            records: None,
        }
    }
}

/// Optional input locations; unset paths resolve under `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub eval_ckpt: Option<PathBuf>,
    pub gen_ckpt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Seed for model initialization and training (the dataset has its own).
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub evaluator: EvalTrainConfig,
    #[serde(default)]
    pub generator: TrainConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_seed() -> u64 {
    1
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: default_seed(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            evaluator: EvalTrainConfig::default(),
            generator: TrainConfig::default(),
            generation: GenerationConfig::default(),
            reward: RewardConfig::default(),
            bench: BenchConfig::default(),
            ablation: Ablation::None,
            paths: PathsConfig::default(),
        }
    }
}

/// Turns a deserialization failure into a config error naming the key.
fn key_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let msg = err.inner().to_string();
    let key = if path == "." || path.is_empty() { "<root>".to_string() } else { path };
    Error::config(key, msg)
}

impl Config {
    pub fn from_value(value: Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::config("<root>", "config must be a JSON object"))?;
        if !obj.contains_key("version") {
            return Err(Error::config("version", "required field is missing"));
        }
        let cfg: Config = serde_path_to_error::deserialize(value).map_err(key_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput {
                what: "config",
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version)));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.evaluator.validate()?;
        self.generator.validate()?;
        self.reward.validate()?;
        self.gumbel().validate()?;
        if self.bench.cap == 0 {
            return Err(Error::config("bench.cap", "must be positive"));
        }
        if self.bench.records == Some(0) {
            return Err(Error::config("bench.records", "must be positive"));
        }
        Ok(())
    }

    /// Generator training settings with the ablation applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.generator.clone();
        match self.ablation {
            Ablation::None => {}
            Ablation::NoRelativeReward => t.relative_reward = false,
            Ablation::NoL2 => t.alpha = 0.0,
        }
        t
    }

    pub fn gumbel(&self) -> GumbelConfig {
        self.generation.resolve(self.data.list_len, self.data.num_candidates)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Copy with the dotted `key` set to `value`; the key must already exist.
    pub fn with_param(&self, key: &str, value: Value) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::config(key, "no such parameter"))?;
        }
        *slot = value;
        Self::from_value(root)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
