//! Experiment configuration: one JSON document covering data generation,
//! encoder shape, adapters, pooling, loss, optimization and evaluation.
//!
//! Every section rejects unknown keys and every field has a default, so `{}`
//! is the default experiment. The config hash is the first 16 hex digits of
//! the SHA-256 of the canonical serialization (fields in declaration order,
//! defaults filled in), so semantically equal documents share a hash.

use std::path::Path;

use ngcg::datagen::DataConfig;
use ngcg::encoder::EncoderConfig;
use ngcg::objective::{Direction, TemperatureConfig};
use ngcg::pooling::PoolingStrategy;
use ngcg::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self { rank: 16, alpha: 128.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSection {
    pub strategy: PoolingStrategy,
}

impl Default for PoolingSection {
    fn default() -> Self {
        Self {
            strategy: PoolingStrategy::Eos,
        }
    }
}

/// `tau` is the fixed temperature, or the initial one when `learnable`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub learnable: bool,
    pub direction: Direction,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            tau: 0.03,
            learnable: false,
            direction: Direction::Symmetric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// L@D additionally requires the top-1 candidate to be the true one.
    pub strict_loc: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub lora: LoraSection,
    pub pooling: PoolingSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
        self.data.validate().map_err(|e| usage(&e))?;
        self.model.validate().map_err(|e| usage(&e))?;
        self.data.check_encoder(&self.model).map_err(|e| usage(&e))?;
        self.train_config()?.validate().map_err(|e| usage(&e))?;
        Ok(())
    }

    pub fn temperature(&self) -> Result<TemperatureConfig, CliError> {
        let t = if self.loss.learnable {
            TemperatureConfig::learnable(self.loss.tau)
        } else {
            TemperatureConfig::fixed(self.loss.tau)
        };
        t.map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            mode: self.train.mode,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            lora_rank: self.lora.rank,
            lora_alpha: self.lora.alpha,
            pooling: self.pooling.strategy,
            temperature: self.temperature()?,
            direction: self.loss.direction,
            eval_each_epoch: true,
        })
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let t = cfg.train_config().unwrap();
        assert_eq!(t.lora_rank, 16);
        assert_eq!(t.lora_alpha, 128.0);
        assert_eq!(t.temperature, TemperatureConfig::Fixed(0.03));
        assert_eq!(t.pooling, PoolingStrategy::Eos);
        assert_eq!(cfg.data.scenes, 1024);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"extra": 1}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"data": {"scene": 3}}"#,
            r#"{"model": {"dim": 3}}"#,
            r#"{"loss": {"temperature": 0.1}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(doc), Err(CliError::Usage(_))), "{doc}");
        }
    }

    #[test]
    fn hash_is_16_hex_and_tracks_content_not_layout() {
        let a = ExperimentConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        let b = ExperimentConfig::from_json("{ \"train\" : { \"epochs\" : 3 , \"seed\": 7 } }").unwrap();
        let c = ExperimentConfig::from_json(r#"{"train": {"epochs": 4}}"#).unwrap();
        assert_eq!(a.hash().len(), 16);
        assert!(a.hash().chars().all(|ch| ch.is_ascii_hexdigit()));
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn learnable_temperature_and_invalid_values() {
        let cfg = ExperimentConfig::from_json(r#"{"loss": {"learnable": true, "tau": 0.07}}"#).unwrap();
        assert!(cfg.temperature().unwrap().is_learnable());
        assert!(ExperimentConfig::from_json(r#"{"loss": {"tau": -1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"scenes": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"learning_rate": 0}}"#).is_err());
    }
}
