use std::path::{Path, PathBuf};

use abfpe::{AugmentationConfig, ModelConfig, TrainConfig};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

/// Everything a training run needs, as read from and written to TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks field invariants and that the data manifest exists.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        match &self.data {
            None => bail!("no training manifest given (--data or `data` in the config)"),
            Some(p) if !p.is_file() => bail!("training manifest {} does not exist", p.display()),
            _ => {}
        }
        if self.out.is_none() {
            bail!("no output directory given (--out or `out` in the config)");
        }
        Ok(())
    }

    /// Makes `data` and `out` absolute so the snapshot works from any directory.
    pub fn absolutize(&mut self) -> anyhow::Result<()> {
        let cwd = std::env::current_dir()?;
        for p in [&mut self.data, &mut self.out].into_iter().flatten() {
            if p.is_relative() {
                *p = cwd.join(&*p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            seed: 9,
            data: Some("/d/manifest.jsonl".into()),
            out: Some("/o".into()),
            train: TrainConfig {
                epochs: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_use_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 1\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(toml::from_str::<RunConfig>("seeed = 1\n").is_err());
    }
}
