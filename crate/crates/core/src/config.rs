//! Run configuration: one TOML document holding training settings, scoring
//! and ablation switches, reference-selection options and default paths.
//! Unknown keys are rejected; every omitted key takes its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{EpisodeShape, Setting};
use crate::scoring::{Ablation, ScoreConfig};
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// How the fixed inference references are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestOptions {
    #[serde(rename = "L1")]
    pub normal_shots: usize,
    #[serde(rename = "L2")]
    pub abnormal_shots: usize,
    pub seed: u64,
    pub setting: Setting,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            normal_shots: 4,
            abnormal_shots: 1,
            seed: 0,
            setting: Setting::General,
        }
    }
}

impl ManifestOptions {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.normal_shots, self.abnormal_shots)
    }
}

/// Default file locations; command-line paths take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub features: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub manifest: ManifestOptions,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are plain data")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| match e {
            TrainError::Config(m) => ConfigError::Invalid(m),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        self.manifest
            .shape()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.score.patch_side == 0 {
            return Err(ConfigError::Invalid("patch_side must be positive".into()));
        }
        if self.score.ablation == Ablation::Full && !self.train.nve.enabled {
            return Err(ConfigError::Invalid(
                "ablation \"full\" needs nve.enabled = true; use \"ide_only\" to score raw residuals".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.ide.tokens, 45);
        assert_eq!(cfg.train.nve.k, 12);
        assert_eq!(cfg.train.lambda2, 0.8);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 3;
        cfg.score.ablation = Ablation::MatchingOnly;
        cfg.manifest.setting = Setting::Hard;
        cfg.paths.features = Some("a.idfs".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nepoch = 3\n"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train.nve]\nkk = 3\n"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn nested_sections_parse() {
        let text = "[train]\nL1 = 8\nL2 = 4\n[train.ide]\nresiduals = false\nposenc = \"off\"\nscale = \"paper\"\n[score]\nablation = \"ide_only\"\nupsample = \"nearest\"\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.normal_shots, 8);
        assert!(!cfg.train.ide.residuals);
        assert_eq!(cfg.score.ablation, Ablation::IdeOnly);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nL1 = 1\nL2 = 1\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train.nve]\nenabled = false\n"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
