//! Self-contained run descriptions read by the command-line tool.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{LengthBuckets, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::eval::{BucketBy, DecodeConfig};
use crate::model::ModelConfig;
use crate::train::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "default_buckets")]
    pub buckets: Vec<usize>,
    #[serde(default = "default_bucket_by")]
    pub bucket_by: BucketBy,
}

fn default_buckets() -> Vec<usize> {
    vec![18, 30]
}

fn default_bucket_by() -> BucketBy {
    BucketBy::Reference
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            decode: DecodeConfig::default(),
            buckets: default_buckets(),
            bucket_by: default_bucket_by(),
        }
    }
}

impl EvalSettings {
    pub fn length_buckets(&self) -> Result<LengthBuckets> {
        LengthBuckets::new(self.buckets.clone())
    }
}

/// Model, optimisation, data and evaluation settings of one experiment.
/// `seed` initialises the model; `trainer.seed` drives shuffling and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub task: Option<SyntheticTaskSpec>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if let Some(t) = &self.task {
            t.validate()?;
        }
        if self.eval.decode.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        self.eval.length_buckets().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Reads a JSON document; malformed or unknown fields are configuration errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
