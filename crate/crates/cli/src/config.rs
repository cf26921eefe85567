//! Run configuration: one TOML document with nested tables.
//!
//! ```toml
//! output_dir = "runs/mnist"
//!
//! [train]            # TrainConfig, including [train.model], [train.objective], ...
//! total_steps = 8000
//!
//! [data]
//! format = "idx"     # or "cifar10"
//! train_images = "data/mnist/train-images-idx3-ubyte.gz"
//!
//! [[groups.groups]]
//! name = "HC0"
//! modules = [0, 1]
//! ```
//!
//! Unknown keys anywhere are rejected. Omitted keys take their defaults, and
//! the copy written next to a run has every default filled in.

use std::path::PathBuf;

use anyhow::{bail, Result};
use scg_core::analysis::{AnalysisConfig, ModuleGroupSpec};
use scg_core::completion::CompletionConfig;
use scg_core::dataset::{load_cifar10, load_idx, Dataset};
use scg_core::objective::GradCheckConfig;
use scg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Modules per group when the config does not list groups.
pub const DEFAULT_GROUP_SIZE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: DataFormat,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// CIFAR-10 batch files (`format = "cifar10"`).
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    /// Use only the first `n` training images (0 = all).
    pub train_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Idx,
            train_images: "data/mnist/train-images-idx3-ubyte.gz".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte.gz".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte.gz".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte.gz".into(),
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            train_limit: 0,
        }
    }
}

impl DataConfig {
    pub fn load_train(&self) -> Result<Dataset> {
        let d = match self.format {
            DataFormat::Idx => load_idx(&self.train_images, &self.train_labels)?,
            DataFormat::Cifar10 => load_cifar(&self.cifar_train, "cifar_train")?,
        };
        Ok(if self.train_limit > 0 { d.truncated(self.train_limit) } else { d })
    }

    pub fn load_test(&self) -> Result<Dataset> {
        Ok(match self.format {
            DataFormat::Idx => load_idx(&self.test_images, &self.test_labels)?,
            DataFormat::Cifar10 => load_cifar(&self.cifar_test, "cifar_test")?,
        })
    }
}

fn load_cifar(paths: &[PathBuf], key: &str) -> Result<Dataset> {
    if paths.is_empty() {
        bail!("data.{key} lists no files");
    }
    Ok(load_cifar10(paths)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub groups: ModuleGroupSpec,
    pub analysis: AnalysisConfig,
    pub completion: CompletionConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: "runs/default".into(),
            groups: ModuleGroupSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
            completion: CompletionConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses, fills derived defaults and validates. An empty group list
    /// becomes consecutive pairs of modules.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.materialized()
    }

    pub fn materialized(mut self) -> Result<Self> {
        if self.groups.groups.is_empty() {
            self.groups = ModuleGroupSpec::contiguous(self.train.model.modules, DEFAULT_GROUP_SIZE);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.groups.validate(self.train.model.modules)?;
        if self.completion.batch_size == 0 || self.completion.train_images == 0 || self.completion.eval_images == 0 {
            bail!("completion batch_size, train_images and eval_images must be >= 1");
        }
        Ok(())
    }

    /// Every field, defaults included.
    pub fn to_text(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
