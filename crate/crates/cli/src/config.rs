//! Experiment configuration files.

use std::path::{Path, PathBuf};

use adbench::cohort::{Labeling, Selection};
use adbench::data::PrepConfig;
use adbench::models::{ModelConfig, ModelKind};
use adbench::train::{AugmentConfig, TrainConfig};
use adbench::volume::NormMode;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCohort {
    pub name: String,
    pub path: PathBuf,
}

/// Architecture knobs left at their defaults unless set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchOverrides {
    pub width: Option<f64>,
    pub token_dim: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub ff_dim: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub weighted_loss: Option<bool>,
    pub augment: Option<AugmentConfig>,
}

fn default_folds() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Cohort directory holding `manifest.csv`, or the manifest itself.
    pub cohort: PathBuf,
    #[serde(default)]
    pub external: Vec<ExternalCohort>,
    pub model: ModelKind,
    pub labeling: Labeling,
    pub classes: usize,
    pub slices: usize,
    pub normalization: NormMode,
    pub selection: Selection,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prep: PrepConfig,
    #[serde(default)]
    pub arch: ArchOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
}

impl ExperimentConfig {
    /// Parses JSON, reporting schema violations with the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config error at `{path}`: {}", e.into_inner())
        })
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config error at `{path}`: {}", e.into_inner())
        })
    }

    /// Loads a config file; relative cohort paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| path.display().to_string())?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.cohort);
        self.external.iter_mut().for_each(|e| fix(&mut e.path));
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.model, self.classes, self.slices).with_image_size(self.prep.grid[0]);
        let a = &self.arch;
        if let Some(w) = a.width {
            m.width = w;
        }
        if let Some(v) = a.token_dim {
            m.token_dim = v;
        }
        if let Some(v) = a.heads {
            m.heads = v;
        }
        if let Some(v) = a.layers {
            m.layers = v;
        }
        if let Some(v) = a.ff_dim {
            m.ff_dim = v;
        }
        if a.dropout.is_some() {
            m.dropout = a.dropout;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::for_model(self.model);
        TrainConfig {
            lr: t.lr.unwrap_or(d.lr),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            max_epochs: t.max_epochs.unwrap_or(d.max_epochs),
            patience: t.patience.unwrap_or(d.patience),
            min_delta: t.min_delta.unwrap_or(d.min_delta),
            weighted_loss: t.weighted_loss.unwrap_or(d.weighted_loss),
            augment: t.augment.unwrap_or(d.augment),
            stop_at_auc: None,
            seed: self.seed,
        }
    }

    /// Cross-field checks not expressible in the schema.
    pub fn validate(&self) -> Result<()> {
        if self.classes != self.labeling.num_classes() {
            bail!("labeling {} produces {} classes, config says {}", self.labeling.as_str(), self.labeling.num_classes(), self.classes);
        }
        let [x, y, z] = self.prep.grid;
        if x != y {
            bail!("prep.grid must be square in-plane, got {x}x{y}");
        }
        let m = self.model_config()?;
        if adbench::data::full_planes(&m) && z > x {
            bail!("77-slice mode needs grid depth <= {x}, got {z}");
        }
        if !adbench::data::full_planes(&m) && z < 16 {
            bail!("16-slice models need grid depth >= 16, got {z}");
        }
        if self.folds < 3 {
            bail!("folds must be at least 3, got {}", self.folds);
        }
        let mut names: Vec<&str> = self.external.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains(',')) {
            bail!("external cohort names must be unique, non-empty and comma-free");
        }
        self.train_config().validate()?;
        Ok(())
    }

    /// SHA-256 of the effective configuration in canonical (sorted-key) JSON.
    pub fn hash(&self) -> Result<String> {
        let effective = serde_json::json!({
            "cohort": self.cohort,
            "external": self.external,
            "labeling": self.labeling,
            "normalization": self.normalization,
            "selection": self.selection,
            "folds": self.folds,
            "prep": self.prep,
            "model": self.model_config()?,
            "train": self.train_config(),
        });
        let canonical = serde_json::to_string(&effective)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn manifest_path(&self) -> PathBuf {
        manifest_in(&self.cohort)
    }
}

/// A cohort path may name the directory or the manifest inside it.
pub fn manifest_in(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(adbench::synth::MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{"cohort": "c", "model": "presnet", "labeling": "visit953", "classes": 2,
        "slices": 16, "normalization": "zscore_per_image", "selection": "first"}"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let c = ExperimentConfig::from_json(MIN).unwrap();
        assert_eq!(c.folds, 10);
        c.validate().unwrap();
        let t = c.train_config();
        assert_eq!((t.lr, t.batch_size, t.patience), (5e-4, 8, 30));
        assert_eq!(c.model_config().unwrap().image_size, 128);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = MIN.replace("zscore_per_image", "zscore_sideways");
        let msg = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("`normalization`"), "{msg}");
        let bad = MIN.replace("\"first\"}", "\"first\", \"train\": {\"lr\": \"fast\"}}");
        let msg = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("`train.lr`"), "{msg}");
        let bad = MIN.replace("\"first\"}", "\"first\", \"colour\": 1}");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn cross_field_checks() {
        let c = ExperimentConfig { classes: 3, ..ExperimentConfig::from_json(MIN).unwrap() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { model: ModelKind::InceptionGrid, slices: 77, ..ExperimentConfig::from_json(MIN).unwrap() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_effective_config() {
        let a = ExperimentConfig::from_json(MIN).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.lr = Some(5e-4);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap(), "explicit default is the same experiment");
        b.seed = 1;
        b.train.lr = None;
        assert_eq!(a.hash().unwrap().len(), 64);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
