//! Experiment configuration: one JSON document for a whole run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::FocalParams;
use crate::model::DetectorConfig;
use crate::ssl::{SslConfig, TrainConfig};
use crate::volume::GenConfig;

/// Number of scans generated per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            labeled: 4,
            unlabeled: 32,
            test: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GenConfig,
    pub splits: SplitCounts,
    pub detector: DetectorConfig,
    pub ssl: SslConfig,
    pub focal: FocalParams,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.detector.validate()?;
        self.ssl.validate()?;
        self.focal.validate()?;
        self.train.validate()?;
        let (vol, patch) = (self.generator.volume_shape, self.detector.input_patch);
        if (0..3).any(|a| vol[a] < patch[a]) {
            return Err(Error::Config(format!("patch {patch:?} does not fit in volumes {vol:?}")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Override every seed of the run.
    pub fn reseed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.detector.weight_init_seed = seed;
        self.ssl.seed = seed;
    }
}
