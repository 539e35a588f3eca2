use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

pub const PRESETS: [&str; 3] = ["desk", "overfit", "paper-iii-a"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives per-epoch shuffling.
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::desk(),
            epochs: 30,
            batch_size: 8,
            seed: 42,
            train_manifest: None,
            eval_manifest: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Named presets:
    ///
    /// | name          | optimizer                 | lr    | epochs | batch |
    /// |---------------|---------------------------|-------|--------|-------|
    /// | `desk`        | adam (0.9, 0.999)         | 1e-3  | 30     | 8     |
    /// | `overfit`     | adam (0.9, 0.999)         | 1e-3  | 200    | 16    |
    /// | `paper-iii-a` | sgd, momentum 0.9, L2 1e-6| 1e-6  | 200    | 16    |
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "desk" => base,
            "overfit" => Self {
                epochs: 200,
                batch_size: 16,
                ..base
            },
            "paper-iii-a" => Self {
                optim: OptimConfig::reference_sgd(),
                epochs: 200,
                batch_size: 16,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; available: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets both the shuffling seed and the weight-initialization seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        self.model.validate()?;
        self.optim.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        let reference = RunConfig::preset("paper-iii-a").unwrap();
        assert_eq!((reference.epochs, reference.batch_size, reference.optim.lr), (200, 16, 1e-6));
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 3, "model": {"widths": [2,2,2,2]}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.conv_kernel, 3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(RunConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
