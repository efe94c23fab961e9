use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{BenchmarkError, HeadConfig, Result, SgdSchedule};
use crate::embedder::{ClassExamples, EmbedderParams};
use crate::proto::{ClassId, Embedding};

/// Softmax-regression classifier over embeddings. Row `i` scores
/// `classes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    dim: usize,
    classes: Vec<ClassId>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Train on the current mission's classes only (sequential fine-tuning).
    NewOnly,
    /// Train on the union of all data given.
    Joint,
}

impl LinearHead {
    pub fn new(dim: usize) -> Self {
        LinearHead {
            dim,
            classes: Vec::new(),
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    fn row_of(&self, c: ClassId) -> Option<usize> {
        self.classes.iter().position(|&k| k == c)
    }

    /// Appends a zero row for every class not yet known.
    pub fn add_classes(&mut self, ids: impl IntoIterator<Item = ClassId>) {
        for c in ids {
            if self.row_of(c).is_none() {
                self.classes.push(c);
                self.weights.push(vec![0.0; self.dim]);
                self.bias.push(0.0);
            }
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(w, x)| w * f64::from(*x)).sum::<f64>())
            .collect()
    }

    /// Highest-scoring class; ties go to the earlier row.
    pub fn predict(&self, x: &[f32]) -> Result<ClassId> {
        if self.classes.is_empty() {
            return Err(BenchmarkError::EmptyModel);
        }
        if x.len() != self.dim {
            return Err(BenchmarkError::Dataset(format!(
                "expected {} features, got {}",
                self.dim,
                x.len()
            )));
        }
        let logits = self.logits(x);
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        Ok(self.classes[best])
    }

    /// Minibatch SGD with Nesterov momentum, weight decay on the weights and
    /// a step learning-rate schedule. New classes get fresh rows. Returns the
    /// mean training loss of each epoch.
    pub fn fit(
        &mut self,
        features: &BTreeMap<ClassId, Vec<Embedding>>,
        config: &SgdSchedule,
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<f64>> {
        config.validate()?;
        if features.values().all(Vec::is_empty) {
            return Err(BenchmarkError::Dataset("no training examples".into()));
        }
        self.add_classes(features.keys().copied());
        let mut samples: Vec<(usize, &[f32])> = Vec::new();
        for (c, xs) in features {
            let row = self.row_of(*c).expect("row added");
            for x in xs {
                if x.len() != self.dim {
                    return Err(BenchmarkError::Dataset(format!(
                        "expected {} features, got {}",
                        self.dim,
                        x.len()
                    )));
                }
                samples.push((row, x));
            }
        }
        let rows = self.classes.len();
        let mut vel_w = vec![vec![0.0; self.dim]; rows];
        let mut vel_b = vec![0.0; rows];
        let mut trace = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let lr = config.learning_rate * config.lr_gamma.powi((epoch / config.lr_step) as i32);
            samples.shuffle(rng);
            let mut total = 0.0;
            for batch in samples.chunks(config.batch_size) {
                let mut grad_w = vec![vec![0.0; self.dim]; rows];
                let mut grad_b = vec![0.0; rows];
                for &(target, x) in batch {
                    let logits = self.logits(x);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    total += z.ln() + max - logits[target];
                    for (r, e) in exps.iter().enumerate() {
                        let d = e / z - if r == target { 1.0 } else { 0.0 };
                        grad_b[r] += d;
                        for (g, xv) in grad_w[r].iter_mut().zip(x) {
                            *g += d * f64::from(*xv);
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                for r in 0..rows {
                    for j in 0..self.dim {
                        let g = grad_w[r][j] * scale + config.weight_decay * self.weights[r][j];
                        vel_w[r][j] = config.momentum * vel_w[r][j] + g;
                        self.weights[r][j] -= lr * (g + config.momentum * vel_w[r][j]);
                    }
                    let g = grad_b[r] * scale;
                    vel_b[r] = config.momentum * vel_b[r] + g;
                    self.bias[r] -= lr * (g + config.momentum * vel_b[r]);
                }
            }
            let mean = total / samples.len() as f64;
            if !mean.is_finite() {
                return Err(BenchmarkError::Diverged);
            }
            trace.push(mean);
        }
        if self.weights.iter().flatten().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(BenchmarkError::Diverged);
        }
        Ok(trace)
    }
}

/// Embeds `data` with the frozen embedder and fits the head on it.
pub fn train_linear_head(
    head: &mut LinearHead,
    params: &EmbedderParams,
    data: &ClassExamples,
    mode: HeadMode,
    config: &HeadConfig,
    rng: &mut impl rand::Rng,
) -> Result<Vec<f64>> {
    let features = data
        .iter()
        .map(|(c, xs)| Ok((*c, params.embed_all(xs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let schedule = match mode {
        HeadMode::NewOnly => &config.new_only,
        HeadMode::Joint => &config.joint,
    };
    head.fit(&features, schedule, rng)
}
