use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costmodel::{DeviceProfile, LayoutConfig};
use crate::engine::Hyperparams;
use crate::error::{Error, Result};
use crate::graph::Preset;
use crate::importance::{Method, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

/// Sizes of the generated splits when `dataset` is `synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            test_samples: 400,
            classes: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepTimeConfig {
    pub warmup: usize,
    pub reps: usize,
    /// Batch used for timing; defaults to the training batch size.
    pub batch: Option<usize>,
}

impl Default for StepTimeConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            reps: 20,
            batch: None,
        }
    }
}

/// One sweep: train baselines, prune at each ratio with each method, fine-tune
/// and measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dataset: DatasetKind,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// CIFAR-10 classes to keep, relabelled `0..k` in list order.
    #[serde(default)]
    pub class_subset: Option<Vec<u32>>,
    /// Stratified fraction of each split kept after class filtering.
    #[serde(default = "one")]
    pub train_fraction: f64,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    pub ratios: Vec<f64>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub scope: Scope,
    pub reload: Vec<bool>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub layout: LayoutConfig,
    #[serde(default)]
    pub profile: DeviceProfile,
    #[serde(default)]
    pub step_time: StepTimeConfig,
    /// Worker threads for independent sweep points; `None` uses all cores.
    #[serde(default)]
    pub jobs: Option<usize>,
    pub out_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.ratios.first() != Some(&0.0) {
            return bad("ratios must start with the 0.0 baseline");
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratios must be strictly ascending");
        }
        if self.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("ratios must lie in [0, 1)");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.reload.is_empty() {
            return bad("reload must list at least one of true/false");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must be in (0, 1]");
        }
        if self.dataset == DatasetKind::Cifar10 && self.data_dir.is_none() {
            return bad("dataset cifar10 needs data_dir");
        }
        if self.step_time.reps < 5 {
            return bad("step_time.reps must be at least 5");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        self.hyperparams.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.layout.validate()?;
        self.profile.validate()?;
        Ok(())
    }
}
