//! Run configuration file: training settings plus dataset, output and
//! evaluation options. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Gates with inclusion probability below this are removed.
    pub threshold: f64,
    /// Posterior samples averaged at prediction time.
    pub n_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { threshold: 1e-3, n_samples: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Preset name or path to a dataset file.
    pub dataset: String,
    /// Seed of the train/test split and of generated presets.
    pub data_seed: u64,
    pub test_fraction: f64,
    /// Parent directory of the per-run output directories.
    pub out: String,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            dataset: "blobs".into(),
            data_seed: 0,
            test_fraction: 0.2,
            out: "runs".into(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if !(0.0..1.0).contains(&self.eval.threshold) {
            return Err(Error::config(format!("threshold must be in [0, 1), got {}", self.eval.threshold)));
        }
        if self.eval.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        self.train.validate()
    }
}
