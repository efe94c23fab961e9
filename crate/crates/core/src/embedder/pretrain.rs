use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    episode_loss_and_grad, sample_episode, ClassExamples, DropoutConfig, EmbedError, EmbedderParams, EmbedderSpec,
    Gradients, PretrainConfig, Result,
};

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EmbedderParams,
    /// Episode loss before each optimizer step.
    pub loss_trace: Vec<f64>,
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Gradients,
    v: Gradients,
    step: i32,
}

impl Adam {
    fn new(params: &EmbedderParams, config: &PretrainConfig) -> Self {
        Adam {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut EmbedderParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut f32, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p = (f64::from(*p) - step) as f32;
        };
        for (((layer, g), m), v) in params
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            for i in 0..layer.weights.len() {
                update(
                    &mut layer.weights[i],
                    g.weights[i],
                    &mut m.weights[i],
                    &mut v.weights[i],
                );
            }
            for i in 0..layer.bias.len() {
                update(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
            }
        }
    }
}

/// Episodic pretraining with Adam; the learning rate halves every
/// `lr_half_every` episodes. Single-threaded and fully determined by
/// `(spec.seed, config.seed, dataset)`.
pub fn pretrain(dataset: &ClassExamples, spec: EmbedderSpec, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let mut params = EmbedderParams::init(spec)?;
    let mut trace = Vec::with_capacity(config.episodes);
    if config.episodes == 0 || params.num_parameters() == 0 {
        return Ok(PretrainOutcome {
            params,
            loss_trace: trace,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&params, config);
    for episode_idx in 0..config.episodes {
        let episode = sample_episode(dataset, config, &mut rng)?;
        let dropout = DropoutConfig {
            rate: config.dropout_rate,
            seed: rng.next_u64(),
        };
        let (loss, grads) = match episode_loss_and_grad(&params, &episode, dropout) {
            Ok(v) => v,
            Err(EmbedError::NonFiniteLoss) => return Err(EmbedError::Diverged { episode: episode_idx }),
            Err(e) => return Err(e),
        };
        trace.push(loss);
        let halvings = (episode_idx / config.lr_half_every) as i32;
        let lr = config.learning_rate * 0.5f64.powi(halvings);
        adam.apply(&mut params, &grads, lr);
        if params
            .layers()
            .iter()
            .any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()))
        {
            return Err(EmbedError::Diverged { episode: episode_idx });
        }
        if (episode_idx + 1) % 500 == 0 {
            log::debug!("pretrain episode {} loss {:.4}", episode_idx + 1, loss);
        }
    }
    Ok(PretrainOutcome {
        params,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn clusters(n_classes: u32, per_class: usize, dim: usize, seed: u64) -> ClassExamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..n_classes)
            .map(|c| {
                let centre: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let pts = (0..per_class)
                    .map(|_| centre.iter().map(|m| m + noise.sample(&mut rng) as f32).collect())
                    .collect();
                (c, pts)
            })
            .collect()
    }

    #[test]
    fn zero_episodes_returns_initialization() {
        let data = clusters(6, 100, 8, 1);
        let spec = EmbedderSpec::mlp(8, vec![16], 4, 9);
        let config = PretrainConfig {
            episodes: 0,
            ..PretrainConfig::default()
        };
        let out = pretrain(&data, spec.clone(), &config).unwrap();
        assert_eq!(out.params, EmbedderParams::init(spec).unwrap());
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let data = clusters(6, 100, 8, 2);
        let spec = EmbedderSpec::mlp(8, vec![16], 4, 3);
        let config = PretrainConfig {
            episodes: 60,
            ..PretrainConfig::default()
        };
        let a = pretrain(&data, spec.clone(), &config).unwrap();
        let b = pretrain(&data, spec, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn loss_decreases_on_gaussian_clusters() {
        let data = clusters(10, 100, 16, 3);
        let spec = EmbedderSpec::mlp(16, vec![32], 8, 4);
        let out = pretrain(&data, spec, &PretrainConfig::default()).unwrap();
        assert_eq!(out.loss_trace.len(), 2000);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let first = mean(&out.loss_trace[..100]);
        let last = mean(&out.loss_trace[1900..]);
        assert!(last < first, "first {first} last {last}");
    }

    #[test]
    fn identity_has_nothing_to_train() {
        let data = clusters(6, 100, 4, 5);
        let out = pretrain(&data, EmbedderSpec::identity(4), &PretrainConfig::default()).unwrap();
        assert_eq!(out.params.num_parameters(), 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let data = clusters(6, 100, 4, 5);
        let config = PretrainConfig {
            k_min: 10,
            k_max: 5,
            ..PretrainConfig::default()
        };
        assert!(matches!(
            pretrain(&data, EmbedderSpec::mlp(4, vec![4], 2, 0), &config),
            Err(EmbedError::InvalidConfig(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_episode() {
        let data = clusters(6, 100, 4, 6);
        let config = PretrainConfig {
            learning_rate: 1e300,
            episodes: 50,
            ..PretrainConfig::default()
        };
        let err = pretrain(&data, EmbedderSpec::mlp(4, vec![4], 2, 0), &config).unwrap_err();
        assert!(matches!(err, EmbedError::Diverged { .. }), "{err:?}");
    }
}
