//! Run configuration: one TOML document with a table per component. Every
//! field has a default, so an empty file is a complete configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{AnchorConfig, Policy};
use crate::reward::RewardConfig;
use crate::rng::sha256_hex;
use crate::trainer::{EvalConfig, TrainConfig};
use crate::warm::InitConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub reward: RewardConfig,
    pub anchors: AnchorConfig,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.world.validate().map_err(|e| inv(e.to_string()))?;
        self.reward.validate().map_err(|e| inv(e.to_string()))?;
        self.anchors.validate().map_err(|e| inv(e.to_string()))?;
        self.train.validate().map_err(|e| inv(e.to_string()))?;
        if self.reward.target_attribute != self.world.attribute {
            return Err(inv(format!(
                "reward.target_attribute {:?} differs from world.attribute {:?}",
                self.reward.target_attribute, self.world.attribute
            )));
        }
        if self.eval.bins == 0 || self.eval.group_size < 1 || !(self.eval.temperature >= 0.0) {
            return Err(inv("eval needs bins >= 1, group_size >= 1 and temperature >= 0".into()));
        }
        if !(self.eval.delta > 0.0 && self.eval.delta <= 1.0) {
            return Err(inv("eval.delta must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn policy(&self) -> Policy {
        Policy::new(
            (self.world.width, self.world.height),
            &self.anchors,
            &self.world.class_names,
            &self.world.attribute,
        )
    }
}
