//! Experiment configuration: one TOML file with `dataset`, `vae`, `cluster`, `classifier`
//! and `sweep` sections plus a top-level output directory and master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::data::{BagDatasetSpec, TissueParams};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::models::{CnnArch, InputShape, VaeArch};
use crate::training::{OptimizerConfig, OptimizerKind, TrainRunSpec};

/// Overrides `dataset.data_root` when set.
pub const DATA_ROOT_ENV: &str = "CCEPLUS_DATA_ROOT";

/// Stable 64-bit seed for a named pipeline component.
pub fn derive_seed(master: u64, descriptor: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(descriptor.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Width {
    Full,
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    /// A folder of RGB slide images listed in `labels.tsv`.
    Slides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Cce,
    CcePlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideConfig {
    /// `file<TAB>label<TAB>split` rows, relative to the data root; split is `train` or `test`.
    pub labels_file: PathBuf,
    pub patches_per_slide: usize,
    pub patch_size: usize,
    pub hue_low: f64,
    pub hue_high: f64,
    pub saturation_floor: f64,
    pub min_region_area: usize,
}

impl Default for SlideConfig {
    fn default() -> Self {
        let t = TissueParams::default();
        Self {
            labels_file: "labels.tsv".into(),
            patches_per_slide: 64,
            patch_size: 28,
            hue_low: t.hue_low,
            hue_high: t.hue_high,
            saturation_floor: t.saturation_floor,
            min_region_area: t.min_region_area,
        }
    }
}

impl SlideConfig {
    pub fn tissue(&self) -> TissueParams {
        TissueParams {
            hue_low: self.hue_low,
            hue_high: self.hue_high,
            saturation_floor: self.saturation_floor,
            min_region_area: self.min_region_area,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub data_root: PathBuf,
    /// Use only the first `train_limit` training images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub bag_size: usize,
    /// Defaults to `train pool / (bag_size * num_classes)`, at least 1.
    pub num_bags_per_class: Option<usize>,
    pub distractor_fraction: f64,
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub slides: SlideConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mnist,
            data_root: "data/mnist".into(),
            train_limit: None,
            test_limit: None,
            bag_size: 10,
            num_bags_per_class: None,
            distractor_fraction: 0.5,
            num_classes: 10,
            seed: None,
            slides: SlideConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub width: Width,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    pub seed: Option<u64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            width: Width::Full,
            epochs: 25,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            decay_rate: 0.95,
            clip_norm: Some(5.0),
            checkpoint_every: 0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: Option<u64>,
    pub tol: f64,
    pub max_iters: usize,
    /// k-means++ starts; the lowest-inertia fit is kept.
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 100,
            seed: None,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub loss: LossName,
    pub alpha: f64,
    pub width: Width,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    /// Measure test accuracy after every epoch rather than only at the end.
    pub eval_each_epoch: bool,
    pub seed: Option<u64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            loss: LossName::CcePlus,
            alpha: 0.5,
            width: Width::Full,
            epochs: 25,
            batch_size: 32,
            optimizer: OptimizerKind::SgdExpDecay,
            learning_rate: 0.001,
            decay_rate: 0.95,
            clip_norm: Some(5.0),
            checkpoint_every: 0,
            eval_each_epoch: true,
            seed: None,
        }
    }
}

impl ClassifierConfig {
    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            LossName::Cce => LossKind::Cce,
            LossName::CcePlus => LossKind::CcePlus { alpha: self.alpha },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub bag_sizes: Vec<usize>,
    pub include_cce: bool,
    /// One CCE+ row per cluster count, at `classifier.alpha`.
    pub cluster_counts: Vec<usize>,
    /// Cluster count of the optional alpha = 0 ablation row.
    pub alpha_zero_k: usize,
    pub alpha_zero_bag_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            bag_sizes: vec![10, 50, 100, 200, 500],
            include_cce: true,
            cluster_counts: vec![10, 20, 100],
            alpha_zero_k: 200,
            alpha_zero_bag_size: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub dataset: DatasetConfig,
    pub vae: VaeConfig,
    pub cluster: ClusterConfig,
    pub classifier: ClassifierConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: "runs/default".into(),
            master_seed: 2019,
            dataset: DatasetConfig::default(),
            vae: VaeConfig::default(),
            cluster: ClusterConfig::default(),
            classifier: ClassifierConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the data-root environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            self.dataset.data_root = root.into();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.classifier.alpha) {
            return bad(format!("classifier.alpha {} outside [0, 1]", self.classifier.alpha));
        }
        if self.cluster.k == 0 || self.sweep.cluster_counts.contains(&0) || self.sweep.alpha_zero_k == 0 {
            return bad("cluster counts must be at least 1".into());
        }
        if self.sweep.bag_sizes.contains(&0) {
            return bad("sweep.bag_sizes must be positive".into());
        }
        self.bag_spec(self.dataset.bag_size, 1).validate()?;
        self.vae_run_spec().validate()?;
        self.classifier_run_spec(self.classifier.loss_kind(), 0).validate()?;
        if self.cluster.max_iters == 0 || !(self.cluster.tol >= 0.0) {
            return bad("cluster.max_iters must be positive and cluster.tol non-negative".into());
        }
        Ok(())
    }

    /// Checks that the data root exists.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.dataset.data_root.is_dir() {
            return Err(Error::Config(format!(
                "data root {} is not a directory (set {DATA_ROOT_ENV} to override)",
                self.dataset.data_root.display()
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML, excluding filesystem locations.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.dataset.data_root = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn seed_for(&self, descriptor: &str) -> u64 {
        derive_seed(self.master_seed, descriptor)
    }

    pub fn input_shape(&self) -> InputShape {
        match self.dataset.kind {
            DatasetKind::Mnist => InputShape::MNIST,
            DatasetKind::Slides => InputShape {
                height: self.dataset.slides.patch_size,
                width: self.dataset.slides.patch_size,
                channels: 3,
            },
        }
    }

    pub fn vae_arch(&self) -> VaeArch {
        let arch = match self.vae.width {
            Width::Full => VaeArch::mnist(),
            Width::Half => VaeArch::mnist_half(),
        };
        VaeArch {
            input: self.input_shape(),
            ..arch
        }
    }

    pub fn cnn_arch(&self) -> CnnArch {
        let arch = match self.classifier.width {
            Width::Full => CnnArch::mnist(),
            Width::Half => CnnArch::mnist_half(),
        };
        CnnArch {
            input: self.input_shape(),
            classes: self.dataset.num_classes,
            ..arch
        }
    }

    pub fn bags_seed(&self, bag_size: usize) -> u64 {
        self.dataset
            .seed
            .unwrap_or_else(|| self.seed_for(&format!("bags;n={bag_size}")))
    }

    pub fn vae_seed(&self) -> u64 {
        self.vae.seed.unwrap_or_else(|| self.seed_for("vae"))
    }

    pub fn cluster_seed(&self, bag_size: usize, k: usize) -> u64 {
        self.cluster
            .seed
            .unwrap_or_else(|| self.seed_for(&format!("cluster;n={bag_size};k={k}")))
    }

    pub fn bag_spec(&self, bag_size: usize, pool_len: usize) -> BagDatasetSpec {
        let d = &self.dataset;
        BagDatasetSpec {
            bag_size,
            num_bags_per_class: d
                .num_bags_per_class
                .unwrap_or_else(|| (pool_len / (bag_size * d.num_classes).max(1)).max(1)),
            distractor_fraction: d.distractor_fraction,
            num_classes: d.num_classes,
            seed: self.bags_seed(bag_size),
        }
    }

    pub fn vae_run_spec(&self) -> TrainRunSpec {
        let v = &self.vae;
        TrainRunSpec {
            checkpoint_every: v.checkpoint_every,
            clip_norm: v.clip_norm,
            ..TrainRunSpec::new(
                v.epochs,
                v.batch_size,
                self.vae_seed(),
                OptimizerConfig {
                    kind: v.optimizer,
                    learning_rate: v.learning_rate,
                    decay_rate: v.decay_rate,
                    decay_steps: None,
                },
            )
        }
    }

    pub fn classifier_run_spec(&self, loss: LossKind, seed: u64) -> TrainRunSpec {
        let c = &self.classifier;
        TrainRunSpec {
            loss,
            checkpoint_every: c.checkpoint_every,
            clip_norm: c.clip_norm,
            ..TrainRunSpec::new(
                c.epochs,
                c.batch_size,
                c.seed.unwrap_or(seed),
                OptimizerConfig {
                    kind: c.optimizer,
                    learning_rate: c.learning_rate,
                    decay_rate: c.decay_rate,
                    decay_steps: None,
                },
            )
        }
    }
}
