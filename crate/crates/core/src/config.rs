//! Named run profiles and TOML overrides.
//!
//! A config file has optional `[train]`, `[loss]`, `[model]` and `[sim]`
//! tables whose keys mirror the struct fields. Values given in the file
//! replace the profile defaults; callers apply command-line flags afterwards.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::sim::SimConfig;
use crate::train::{Optimizer, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Sht,
    Ucf,
    Sim,
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sht" => Ok(Self::Sht),
            "ucf" => Ok(Self::Ucf),
            "sim" => Ok(Self::Sim),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected sht, ucf or sim)"
            ))),
        }
    }
}

/// Generation guidance `(text, image)` per dataset.
pub fn guidance(profile: ProfileName) -> (f64, f64) {
    match profile {
        ProfileName::Ucf => (6.5, 4.5),
        ProfileName::Sht | ProfileName::Sim => (3.5, 3.5),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProfile {
    pub name: ProfileName,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sim: SimConfig,
}

impl RunProfile {
    pub fn named(name: ProfileName) -> Self {
        let (lr, segments, lambda_da, slots, topk, steps) = match name {
            ProfileName::Sht => (1e-4, 5, 0.2, 100, 1, 1000),
            ProfileName::Ucf => (1e-5, 64, 0.1, 60, 5, 1000),
            ProfileName::Sim => (1e-3, 20, 0.2, 8, 3, 1000),
        };
        let loss_weights = LossWeights {
            lambda_da,
            topk,
            ..LossWeights::default()
        };
        let model = match name {
            ProfileName::Sim => ModelConfig {
                input_dim: 32,
                embed_dim: 16,
                heads: 2,
                abnormal_slots: slots,
                normal_slots: slots,
                tau: 0.1,
            },
            _ => ModelConfig {
                input_dim: 2048,
                embed_dim: 512,
                heads: 4,
                abnormal_slots: slots,
                normal_slots: slots,
                tau: 0.1,
            },
        };
        Self {
            name,
            train: TrainConfig {
                batch_videos_per_stream: 4,
                learning_rate: lr,
                weight_decay: 1e-5,
                segment_number: segments,
                steps,
                seed: 0,
                loss_weights,
                optimizer: Optimizer::Adam,
                random_segments: false,
            },
            model,
            sim: SimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.sim.validate()
    }

    /// Applies a TOML document on top of this profile.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (section, value) in doc {
            let table = value
                .as_table()
                .ok_or_else(|| Error::Config(format!("top-level key {section:?} must be a table")))?;
            match section.as_str() {
                "train" => merge_into(&mut self.train, table, "train")?,
                "loss" => merge_into(&mut self.train.loss_weights, table, "loss")?,
                "model" => merge_into(&mut self.model, table, "model")?,
                "sim" => merge_into(&mut self.sim, table, "sim")?,
                other => return Err(Error::Config(format!("unknown config section [{other}]"))),
            }
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_toml(&text)
    }
}

fn merge_into<T: Serialize + for<'de> Deserialize<'de>>(
    target: &mut T,
    table: &toml::Table,
    section: &str,
) -> Result<()> {
    let mut current = toml::Table::try_from(&*target).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in table {
        if !current.contains_key(k) {
            return Err(Error::Config(format!("unknown key {k:?} in [{section}]")));
        }
        current.insert(k.clone(), v.clone());
    }
    *target = current
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{section}]: {e}")))?;
    Ok(())
}
