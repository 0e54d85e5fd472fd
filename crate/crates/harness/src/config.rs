//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [experiment]
//! name = "simple48-proposed"
//! variant = "proposed"        # proposed | ae_baseline | seg_only
//! preset = "mnist48"          # mnist48 | mnist128 | brats
//! seeds = [0, 1, 2]
//! epochs = 300
//! batch_size = 20
//!
//! [data]
//! manifest = "data/simple48/manifest.jsonl"
//!
//! [loss]                      # omit to use the variant's defaults
//! adv = 3.0
//! rec = 50.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segtrans_core::{Architecture, LossWeights, OptimizerConfig, PresetName, VariantKind};
use segtrans_data::AugmentConfig;

use crate::error::{io_err, Error, Result};

/// Overrides `experiment.output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "SEGTRANS_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub variant: VariantKind,
    pub preset: PresetName,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Labeled presence examples guaranteed in every batch, topped up by
    /// sampling the labeled pool with replacement.
    pub min_labeled_per_batch: usize,
    /// Probability threshold for evaluation masks.
    pub threshold: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Caps steps per epoch for reduced-scale runs.
    pub max_steps_per_epoch: Option<usize>,
    /// Caps the number of validation and test images evaluated.
    pub max_eval_examples: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            variant: VariantKind::Proposed,
            preset: PresetName::Mnist48,
            seeds: vec![0, 1, 2],
            epochs: 300,
            batch_size: 20,
            min_labeled_per_batch: 1,
            threshold: 0.5,
            eval_every: 1,
            checkpoint_every: 10,
            max_steps_per_epoch: None,
            max_eval_examples: None,
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub data: DataSection,
    /// Loss weights; the variant's defaults apply when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossWeights>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    /// Explicit layer tables replacing the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
}

impl ExperimentConfig {
    /// Defaults for a preset: 300 epochs without augmentation for digits,
    /// 500 epochs with augmentation for MRI.
    pub fn for_preset(preset: PresetName, variant: VariantKind, manifest: impl Into<PathBuf>) -> Self {
        let mut experiment = ExperimentSection {
            preset,
            variant,
            name: format!("{}-{}", preset_name(preset), variant.name()),
            ..ExperimentSection::default()
        };
        let mut augment = AugmentSection::default();
        if preset == PresetName::Brats {
            experiment.epochs = 500;
            augment.enabled = true;
        }
        Self {
            experiment,
            data: DataSection {
                manifest: manifest.into(),
            },
            loss: None,
            optimizer: OptimizerConfig::default(),
            augment,
            architecture: None,
        }
    }

    /// Parses a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        if cfg.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn weights(&self) -> LossWeights {
        self.loss.unwrap_or_else(|| self.experiment.variant.default_weights())
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::preset(self.experiment.preset))
    }

    /// Root directory for this experiment's runs, honouring the environment override.
    pub fn output_root(&self) -> PathBuf {
        let base = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.experiment.output_dir.clone());
        base.join(&self.experiment.name)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if e.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if e.min_labeled_per_batch > e.batch_size {
            return Err(Error::Config("min_labeled_per_batch exceeds batch_size".into()));
        }
        if e.eval_every == 0 || e.checkpoint_every == 0 {
            return Err(Error::Config("eval_every and checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", e.threshold)));
        }
        if e.name.is_empty() || e.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name {:?} is not a plain directory name", e.name)));
        }
        self.weights().validate()?;
        self.optimizer.validate()?;
        self.augment.params.validate()?;
        self.architecture().validate()?;
        Ok(())
    }

    /// Launch-time check that every referenced input exists.
    pub fn check_paths(&self) -> Result<()> {
        if !self.data.manifest.is_file() {
            return Err(Error::Config(format!(
                "dataset manifest {} does not exist",
                self.data.manifest.display()
            )));
        }
        Ok(())
    }

    /// Stable digest of the settings that determine a run.
    pub fn digest(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn preset_name(p: PresetName) -> &'static str {
    match p {
        PresetName::Mnist48 => "mnist48",
        PresetName::Mnist128 => "mnist128",
        PresetName::Brats => "brats",
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_preset_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[data]\nmanifest = \"m.jsonl\"\n").unwrap();
        assert_eq!(cfg.experiment.epochs, 300);
        assert_eq!(cfg.experiment.batch_size, 20);
        assert_eq!(cfg.experiment.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.weights(), LossWeights::default());
        assert_eq!(cfg.optimizer.lr_discriminator, 1e-3);
        assert!(!cfg.augment.enabled);
        cfg.validate().unwrap();
    }

    #[test]
    fn baseline_variant_uses_its_own_weights_and_roundtrips() {
        let mut cfg = ExperimentConfig::for_preset(PresetName::Brats, VariantKind::AeBaseline, "x.jsonl");
        assert_eq!(cfg.experiment.epochs, 500);
        assert!(cfg.augment.enabled);
        assert_eq!(cfg.weights(), LossWeights::ae_baseline());
        cfg.loss = Some(LossWeights { seg: 2.0, ..LossWeights::ae_baseline() });
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut cfg = ExperimentConfig::for_preset(PresetName::Mnist48, VariantKind::Proposed, "x");
        cfg.experiment.seeds.clear();
        assert!(cfg.validate().is_err());
        let bad = toml::from_str::<ExperimentConfig>("[experiment]\nbogus = 1\n[data]\nmanifest = \"m\"\n");
        assert!(bad.is_err());
        assert!(cfg.check_paths().is_err());
    }
}
