//! Presets and the run configuration document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::prior::Aggregation;
use crate::synth::DatasetConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small patches and short training for a workstation CPU.
    Desk,
    /// Full-size features, architecture and schedule.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (desk or paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub features: FeatureConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub aggregation: Aggregation,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                preset,
                features: FeatureConfig::desk(),
                dataset: DatasetConfig::default(),
                train: TrainConfig::desk(),
                aggregation: Aggregation::Mean,
            },
            Preset::Paper => RunConfig {
                preset,
                features: FeatureConfig::paper(),
                dataset: DatasetConfig::default(),
                train: TrainConfig::paper(),
                aggregation: Aggregation::Mean,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.train.validate()?;
        let div = 1usize << self.train.blocks.max(1);
        if self.features.n_mels % div != 0 || self.features.patch_frames % div != 0 {
            return Err(Error::Config(format!(
                "patches of {}×{} cannot pass through {} squeezes",
                self.features.n_mels, self.features.patch_frames, self.train.blocks
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
