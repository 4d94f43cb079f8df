use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ccdet::data::SynthConfig;
use ccdet::fusion::FusionVariant;
use ccdet::model::ModelConfig;
use ccdet::train::TrainConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Experiment definition file. Every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError::MissingFile(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| UsageError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train
            .validate()
            .and_then(|_| self.synth.validate())
            .map_err(|e| UsageError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or_default()
    }
}

pub fn parse_stages(s: &str) -> Result<BTreeSet<usize>, String> {
    if s.is_empty() || s == "none" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad stage `{p}`: {e}"))
        })
        .collect()
}

/// Flags that take precedence over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// JSON config with optional `train`, `model` and `synth` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One of cc, concat, vanilla_self, vanilla_cross, rgb_only, ir_only.
    #[arg(long)]
    pub variant: Option<FusionVariant>,
    /// Comma-separated 1-based stages, or `none`.
    #[arg(long, value_parser = parse_stages)]
    pub conv_stages: Option<BTreeSet<usize>>,
    #[arg(long)]
    pub no_augment: bool,
}

impl TrainOverrides {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.variant {
            t.fusion_variant = v;
        }
        if let Some(v) = &self.conv_stages {
            t.conv_ffn_stages = v.clone();
        }
        if self.no_augment {
            t.augment = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"train":{"epochs":5,"lr":0.02},"model":{"dim":8}}"#,
        )
        .unwrap();
        let o = TrainOverrides {
            config: Some(path),
            epochs: Some(7),
            conv_stages: Some(BTreeSet::new()),
            ..Default::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr, 0.02);
        assert!(cfg.train.conv_ffn_stages.is_empty());
        assert_eq!(cfg.model.dim, 8);
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_stages("none").unwrap(), BTreeSet::new());
        assert_eq!(parse_stages("1,2").unwrap(), [1, 2].into());
        assert!(parse_stages("x").is_err());
    }
}
