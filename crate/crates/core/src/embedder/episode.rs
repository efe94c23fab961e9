use rand::seq::index;
use rand::Rng;
use serde::Deserialize;

use super::{ClassExamples, EmbedError, Result};
use crate::proto::ClassId;

/// Episodic pretraining settings.
///
/// `Default` is the desk-scale schedule (2,000 episodes, learning rate halved
/// every 500); [`PretrainConfig::long_schedule`] is the 30,000-episode one.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub dropout_rate: f32,
    pub learning_rate: f64,
    pub lr_half_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Draw the query count separately from the support count.
    pub independent_query_k: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            episodes: 2000,
            n_way: 5,
            k_min: 5,
            k_max: 50,
            dropout_rate: 0.2,
            learning_rate: 1e-3,
            lr_half_every: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            independent_query_k: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn long_schedule() -> Self {
        PretrainConfig {
            episodes: 30_000,
            lr_half_every: 2000,
            ..PretrainConfig::default()
        }
    }

    /// Fixed-shot episodes (`k_min == k_max == k`).
    pub fn fixed_k(self, k: usize) -> Self {
        PretrainConfig {
            k_min: k,
            k_max: k,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(EmbedError::InvalidConfig(msg.to_string()));
        if self.n_way == 0 {
            return bad("n_way must be positive");
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad("need 1 <= k_min <= k_max");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.lr_half_every == 0 {
            return bad("learning rate and halving period must be positive");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam betas must be in (0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam eps must be positive");
        }
        Ok(())
    }
}

/// One few-shot task: `support[i]` and `query[i]` hold examples of `classes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<ClassId>,
    pub support: Vec<Vec<Vec<f32>>>,
    pub query: Vec<Vec<Vec<f32>>>,
    pub k_support: usize,
    pub k_query: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = !self.classes.is_empty()
            && self.k_support > 0
            && self.k_query > 0
            && self.support.len() == self.classes.len()
            && self.query.len() == self.classes.len()
            && self.support.iter().all(|s| s.len() == self.k_support)
            && self.query.iter().all(|q| q.len() == self.k_query);
        if ok {
            Ok(())
        } else {
            Err(EmbedError::InvalidConfig("malformed episode".into()))
        }
    }
}

/// Samples `n_way` distinct classes and, for each, disjoint support and
/// query sets drawn without replacement. The shot count is drawn uniformly
/// from `[k_min, k_max]` once per episode and shared by support and query
/// unless `independent_query_k` is set.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &ClassExamples,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Episode> {
    config.validate()?;
    if dataset.len() < config.n_way {
        return Err(EmbedError::TooFewClasses {
            available: dataset.len(),
            needed: config.n_way,
        });
    }
    let needed = 2 * config.k_max;
    if let Some((class, pool)) = dataset.iter().find(|(_, pool)| pool.len() < needed) {
        return Err(EmbedError::InsufficientExamples {
            class: *class,
            available: pool.len(),
            needed,
        });
    }

    let k_support = rng.random_range(config.k_min..=config.k_max);
    let k_query = if config.independent_query_k {
        rng.random_range(config.k_min..=config.k_max)
    } else {
        k_support
    };

    let ids: Vec<ClassId> = dataset.keys().copied().collect();
    let mut classes = Vec::with_capacity(config.n_way);
    let mut support = Vec::with_capacity(config.n_way);
    let mut query = Vec::with_capacity(config.n_way);
    for pick in index::sample(rng, ids.len(), config.n_way) {
        let class = ids[pick];
        let pool = &dataset[&class];
        let chosen = index::sample(rng, pool.len(), k_support + k_query).into_vec();
        support.push(chosen[..k_support].iter().map(|&i| pool[i].clone()).collect());
        query.push(chosen[k_support..].iter().map(|&i| pool[i].clone()).collect());
        classes.push(class);
    }
    Ok(Episode {
        classes,
        support,
        query,
        k_support,
        k_query,
    })
}
