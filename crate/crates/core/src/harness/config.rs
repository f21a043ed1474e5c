//! Experiment files.
//!
//! A TOML document describing the dataset, models, training, defense,
//! attack, seeds and an optional one-parameter sweep. Every key has a
//! default except the dataset kind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{gen_images, gen_synthetic, load_mnist_idx, SplitDataset};
use crate::attacks::AttackConfig;
use crate::diffcore::Rng;
use crate::error::{Error, Result};
use crate::protocol::{ArchConfig, TrainConfig};

/// A sweep value: any TOML scalar.
pub use toml::Value as SweepValue;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian class clusters, see [`gen_synthetic`].
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Small prototype images split by columns, see [`gen_images`].
    Images {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_image_width")]
        width: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// IDX files; paths are relative to the config file.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_digits")]
        classes: Vec<u8>,
    },
}

fn default_n() -> usize {
    2000
}
fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    20
}
fn default_spread() -> f64 {
    0.6
}
fn default_side() -> usize {
    8
}
fn default_image_width() -> usize {
    16
}
fn default_noise() -> f64 {
    0.1
}
fn default_digits() -> Vec<u8> {
    (0..10).collect()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            n: default_n(),
            classes: default_classes(),
            dim: default_dim(),
            spread: default_spread(),
        }
    }
}

impl DatasetConfig {
    /// Builds the dataset for one seed.
    pub fn load(&self, parties: usize, seed: u64, base_dir: &Path) -> Result<SplitDataset> {
        let mut rng = Rng::named(seed, "data");
        match self {
            DatasetConfig::Synthetic {
                n,
                classes,
                dim,
                spread,
            } => gen_synthetic(*n, *classes, *dim, *spread, parties, &mut rng),
            DatasetConfig::Images {
                n,
                classes,
                height,
                width,
                noise,
            } => gen_images(*n, *classes, *height, *width, *noise, parties, &mut rng),
            DatasetConfig::Mnist {
                images,
                labels,
                classes,
            } => load_mnist_idx(base_dir.join(images), base_dir.join(labels), classes, parties, &mut rng),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { classes, .. } | DatasetConfig::Images { classes, .. } => *classes,
            DatasetConfig::Mnist { classes, .. } => classes.len(),
        }
    }
}

/// A parameter to vary, named by its dotted path in the config tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub param: String,
    pub values: Vec<SweepValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Total party count, the active party included.
    #[serde(default = "default_parties")]
    pub parties: usize,
    /// Passive party running the attack.
    #[serde(default = "default_attacker")]
    pub attacker: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_parties() -> usize {
    2
}
fn default_attacker() -> usize {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_threads() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            parties: default_parties(),
            attacker: default_attacker(),
            seeds: default_seeds(),
            threads: default_threads(),
            out: None,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::None,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.parties < 2 {
            return Err(Error::config("need at least one passive and one active party"));
        }
        if self.attacker == 0 || self.attacker >= self.parties {
            return Err(Error::config(format!(
                "attacker {} is not a passive party (1..{})",
                self.attacker,
                self.parties - 1
            )));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be positive"));
        }
        self.train.validate()?;
        self.attack.validate(self.dataset.classes())?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::config("sweep needs at least one value"));
            }
            for v in &s.values {
                self.with_param(&s.param, v)?;
            }
        }
        Ok(())
    }

    /// A copy with the value at dotted path `param` replaced. The key must
    /// already exist in the fully defaulted config.
    pub fn with_param(&self, param: &str, value: &toml::Value) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = param.split('.').collect();
        for (i, key) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("sweep parameter {param}: {key} is not inside a table")))?;
            let next = table
                .get_mut(*key)
                .ok_or_else(|| Error::config(format!("sweep parameter {param} does not exist")))?;
            if i + 1 == parts.len() {
                *next = value.clone();
            }
            node = next;
        }
        let mut cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("sweep parameter {param}: {e}")))?;
        // the copy describes a single point
        cfg.sweep = None;
        Ok(cfg)
    }

    /// `(sweep value label, config)` per sweep point; a single unlabeled
    /// point without a sweep.
    pub fn points(&self) -> Result<Vec<(String, Self)>> {
        match &self.sweep {
            None => Ok(vec![(String::new(), self.clone())]),
            Some(s) => s
                .values
                .iter()
                .map(|v| Ok((value_label(v), self.with_param(&s.param, v)?)))
                .collect(),
        }
    }
}

/// Plain rendering of a sweep value: numbers in shortest round-trip form,
/// strings without quotes.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        other => other.to_string(),
    }
}
