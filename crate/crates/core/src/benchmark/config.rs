use std::path::Path;

use serde::Deserialize;

use super::{BenchmarkError, Result};
use crate::embedder::{EmbedderKind, EmbedderSpec, PretrainConfig};

/// Mission-loop settings.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_clients: usize,
    pub classes_per_mission: usize,
    pub shots_per_class: usize,
    pub base_fraction: f64,
    /// Cap on train examples used per class; `None` uses the whole pool.
    pub train_examples_per_class: Option<usize>,
    /// Cap on test examples used per class; `None` uses the whole pool.
    pub test_examples_per_class: Option<usize>,
    /// Stop after this many missions; `None` runs until the field pools are
    /// drained.
    pub missions_horizon: Option<usize>,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_clients: 5,
            classes_per_mission: 5,
            shots_per_class: 30,
            base_fraction: 0.5,
            train_examples_per_class: None,
            test_examples_per_class: None,
            missions_horizon: None,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    /// Few-shot missions used for the collective-ascent run.
    pub fn collective_ascent(self) -> Self {
        BenchmarkConfig {
            shots_per_class: 5,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchmarkError::InvalidConfig(m.to_string()));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1");
        }
        if self.classes_per_mission == 0 {
            return bad("classes_per_mission must be at least 1");
        }
        if self.shots_per_class == 0 {
            return bad("shots_per_class must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.base_fraction) {
            return bad("base_fraction must be in [0, 1]");
        }
        if self.train_examples_per_class == Some(0) || self.test_examples_per_class == Some(0) {
            return bad("per-class example caps must be positive");
        }
        Ok(())
    }
}

/// Isotropic Gaussian class clusters. Class means are drawn with entries
/// uniform in `[-mean_scale, mean_scale]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub mean_scale: f64,
    pub std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 40,
            input_dim: 32,
            mean_scale: 1.0,
            std: 0.5,
            train_per_class: 100,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchmarkError::InvalidConfig(m.to_string()));
        if self.n_classes == 0 || self.input_dim == 0 {
            return bad("n_classes and input_dim must be positive");
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return bad("std must be positive");
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return bad("mean_scale must be positive");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train_per_class and test_per_class must be positive");
        }
        Ok(())
    }
}

/// Embedder architecture; the input width comes from the dataset.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: String,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: "mlp".into(),
            hidden_dims: vec![64],
            output_dim: 16,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn to_spec(&self, input_dim: usize) -> Result<EmbedderSpec> {
        let kind: EmbedderKind = self
            .kind
            .parse()
            .map_err(|_| BenchmarkError::InvalidConfig(format!("unknown embedder kind {:?}", self.kind)))?;
        let spec = match kind {
            EmbedderKind::Identity => EmbedderSpec::identity(input_dim),
            EmbedderKind::RandomProjection => EmbedderSpec::random_projection(input_dim, self.output_dim, self.seed),
            EmbedderKind::Mlp => EmbedderSpec::mlp(input_dim, self.hidden_dims.clone(), self.output_dim, self.seed),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One SGD training schedule for a linear head.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Nesterov momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        SgdSchedule {
            epochs: 200,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-2,
            lr_step: 50,
            lr_gamma: 0.1,
            batch_size: 32,
        }
    }
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.lr_step > 0
            && self.lr_gamma > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(BenchmarkError::InvalidConfig("invalid head training schedule".into()))
        }
    }
}

/// Schedules for the linear-head baselines.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Per-mission fine-tuning on new classes only.
    pub new_only: SgdSchedule,
    /// Training on all available classes at once.
    pub joint: SgdSchedule,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            new_only: SgdSchedule {
                epochs: 50,
                weight_decay: 0.0,
                lr_step: 30,
                ..SgdSchedule::default()
            },
            joint: SgdSchedule::default(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        self.new_only.validate()?;
        self.joint.validate()
    }
}

/// Whole config document. Every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub benchmark: BenchmarkConfig,
    pub synthetic: SyntheticSpec,
    pub embedder: EmbedderConfig,
    pub pretrain: PretrainConfig,
    pub head: HeadConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BenchmarkError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
