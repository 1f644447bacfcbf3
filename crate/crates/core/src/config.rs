//! Run configuration: one TOML file with a section per module.
//!
//! Unknown keys are rejected and every missing key takes the module default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::AssignConfig;
use crate::data::WorldSpec;
use crate::embedding::ScoreParams;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::infer::InferConfig;
use crate::train::{Settings, TrainConfig};

/// Text encoder construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub rank: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { rank: 4, seed: 0 }
    }
}

/// How `gen` divides the generated scenes: a fully annotated pretraining
/// part, a task training part, and a held-out test part, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub pretrain: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { pretrain: 200, test: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub assign: AssignConfig,
    pub score: ScoreParams,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// One seed for the world, the encoder and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.encoder.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.settings().validate()?;
        self.infer.validate()?;
        self.eval.validate()?;
        if self.split.pretrain + self.split.test > self.world.scenes {
            return Err(Error::InvalidConfig(format!(
                "split needs {} scenes but the world has {}",
                self.split.pretrain + self.split.test,
                self.world.scenes
            )));
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings { train: self.train.clone(), assign: self.assign.clone(), score: self.score }
    }
}
