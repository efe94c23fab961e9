//! Embedding functions: identity, seeded random projection, and a small
//! trainable MLP with episodic pretraining.

mod episode;
mod io;
mod loss;
mod pretrain;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::proto::{ClassId, Embedding};

pub use episode::{sample_episode, Episode, PretrainConfig};
pub use io::{read_params, write_params};
pub use loss::{episode_grad, episode_loss, episode_loss_and_grad, DropoutConfig, Gradients, LayerGrad};
pub use pretrain::{pretrain, PretrainOutcome};

/// Raw input vectors grouped by class.
pub type ClassExamples = BTreeMap<ClassId, Vec<Vec<f32>>>;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected input length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("numerical overflow in embedder")]
    NonFinite,
    #[error("class {class} has {available} examples, episode needs {needed}")]
    InsufficientExamples {
        class: ClassId,
        available: usize,
        needed: usize,
    },
    #[error("dataset has {available} classes, episode needs {needed}")]
    TooFewClasses { available: usize, needed: usize },
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("pretraining diverged at episode {episode}")]
    Diverged { episode: usize },
    #[error("params file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    Identity,
    RandomProjection,
    Mlp,
}

impl EmbedderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedderKind::Identity => "identity",
            EmbedderKind::RandomProjection => "random_projection",
            EmbedderKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for EmbedderKind {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(EmbedderKind::Identity),
            "random_projection" => Ok(EmbedderKind::RandomProjection),
            "mlp" => Ok(EmbedderKind::Mlp),
            other => Err(EmbedError::InvalidSpec(format!("unknown embedder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layer widths; only meaningful for [`EmbedderKind::Mlp`].
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl EmbedderSpec {
    pub fn identity(dim: usize) -> Self {
        EmbedderSpec {
            kind: EmbedderKind::Identity,
            input_dim: dim,
            output_dim: dim,
            hidden_dims: Vec::new(),
            seed: 0,
        }
    }

    pub fn random_projection(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        EmbedderSpec {
            kind: EmbedderKind::RandomProjection,
            input_dim,
            output_dim,
            hidden_dims: Vec::new(),
            seed,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, seed: u64) -> Self {
        EmbedderSpec {
            kind: EmbedderKind::Mlp,
            input_dim,
            output_dim,
            hidden_dims,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(EmbedError::InvalidSpec("dimensions must be positive".into()));
        }
        match self.kind {
            EmbedderKind::Identity if self.input_dim != self.output_dim => Err(EmbedError::InvalidSpec(
                "identity embedder needs input_dim == output_dim".into(),
            )),
            EmbedderKind::Mlp if self.hidden_dims.contains(&0) => {
                Err(EmbedError::InvalidSpec("hidden widths must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// (inputs, outputs) of each dense layer.
    pub(crate) fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            EmbedderKind::Identity => Vec::new(),
            EmbedderKind::RandomProjection => vec![(self.input_dim, self.output_dim)],
            EmbedderKind::Mlp => {
                let mut widths = vec![self.input_dim];
                widths.extend(&self.hidden_dims);
                widths.push(self.output_dim);
                widths.windows(2).map(|w| (w[0], w[1])).collect()
            }
        }
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| f64::from(*w) * v).sum::<f64>() + f64::from(*b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    spec: EmbedderSpec,
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbedMode {
    Eval,
    /// Inverted dropout on the embedding output.
    Train {
        dropout_rate: f32,
    },
}

impl EmbedderParams {
    /// Seeded initialization. MLP weights are drawn from
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))` and biases start at
    /// zero; a random projection draws `N(0, 1 / output_dim)` entries.
    pub fn init(spec: EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(inputs, outputs)| {
                let weights = match spec.kind {
                    EmbedderKind::RandomProjection => {
                        let normal = Normal::new(0.0, 1.0 / (outputs as f64).sqrt()).expect("positive std");
                        (0..inputs * outputs).map(|_| normal.sample(&mut rng) as f32).collect()
                    }
                    _ => {
                        let a = (6.0 / (inputs + outputs) as f64).sqrt();
                        (0..inputs * outputs).map(|_| rng.random_range(-a..a) as f32).collect()
                    }
                };
                DenseLayer {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(EmbedderParams { spec, layers })
    }

    pub fn from_layers(spec: EmbedderSpec, layers: Vec<DenseLayer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(EmbedError::InvalidSpec(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for ((inputs, outputs), layer) in shapes.into_iter().zip(&layers) {
            let ok = layer.inputs == inputs
                && layer.outputs == outputs
                && layer.weights.len() == inputs * outputs
                && layer.bias.len() == outputs;
            if !ok {
                return Err(EmbedError::InvalidSpec("layer shape does not match spec".into()));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite);
            }
        }
        Ok(EmbedderParams { spec, layers })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn activates(&self, layer_idx: usize) -> bool {
        self.spec.kind == EmbedderKind::Mlp && layer_idx + 1 < self.layers.len()
    }

    /// Network output before dropout, in `f64`.
    pub(crate) fn forward64(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h: Vec<f64> = x.iter().map(|v| f64::from(*v)).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activates(i) {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    pub(crate) fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(EmbedError::ShapeMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Eval-mode embedding.
    pub fn embed_eval(&self, x: &[f32]) -> Result<Embedding> {
        embed(x, self, EmbedMode::Eval, 0)
    }

    pub fn embed_all(&self, xs: &[Vec<f32>]) -> Result<Vec<Embedding>> {
        xs.iter().map(|x| self.embed_eval(x)).collect()
    }
}

/// Inverted-dropout multipliers for one embedding: each entry is `0` with
/// probability `rate` and `1 / (1 - rate)` otherwise.
pub fn dropout_mask(seed: u64, dim: usize, rate: f32) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; dim];
    }
    let keep = 1.0 - f64::from(rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Embeds one input. Eval mode is deterministic; train mode applies
/// inverted dropout with a mask drawn from `dropout_mask_seed`.
pub fn embed(x: &[f32], params: &EmbedderParams, mode: EmbedMode, dropout_mask_seed: u64) -> Result<Embedding> {
    let mut h = params.forward64(x)?;
    if let EmbedMode::Train { dropout_rate } = mode {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(EmbedError::InvalidConfig("dropout rate must be in [0, 1)".into()));
        }
        let mask = dropout_mask(dropout_mask_seed, h.len(), dropout_rate);
        h.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    }
    let out: Embedding = h.into_iter().map(|v| v as f32).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    Ok(out)
}
