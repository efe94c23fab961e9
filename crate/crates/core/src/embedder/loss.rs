use super::{dropout_mask, EmbedError, EmbedderParams, Episode, Result};

/// Dropout applied to embeddings inside an episode. Example `i` (support
/// examples first, then queries, class by class) gets the mask seeded by
/// `mix(seed, i)`, so loss and gradient see identical masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    pub rate: f32,
    pub seed: u64,
}

impl DropoutConfig {
    pub fn none() -> Self {
        DropoutConfig { rate: 0.0, seed: 0 }
    }

    fn mask(&self, example: usize, dim: usize) -> Vec<f64> {
        dropout_mask(mix(self.seed, example as u64), dim, self.rate)
    }
}

// splitmix64 finalizer
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient of a scalar with respect to every [`EmbedderParams`] tensor,
/// laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &EmbedderParams) -> Self {
        Gradients {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= factor);
        }
    }
}

/// Activations of every layer for one example; `acts[0]` is the input.
struct Trace {
    acts: Vec<Vec<f64>>,
}

fn forward_trace(params: &EmbedderParams, x: &[f32]) -> Result<Trace> {
    params.check_input(x)?;
    let mut acts = Vec::with_capacity(params.layers().len() + 1);
    acts.push(x.iter().map(|v| f64::from(*v)).collect::<Vec<_>>());
    for (i, layer) in params.layers().iter().enumerate() {
        let mut h = layer.forward(acts.last().expect("input pushed"));
        if params.activates(i) {
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(h);
    }
    Ok(Trace { acts })
}

fn backward(params: &EmbedderParams, trace: &Trace, grad_out: Vec<f64>, grads: &mut Gradients) {
    let mut g = grad_out;
    for (l, layer) in params.layers().iter().enumerate().rev() {
        if params.activates(l) {
            for (gi, y) in g.iter_mut().zip(&trace.acts[l + 1]) {
                *gi *= 1.0 - y * y;
            }
        }
        let input = &trace.acts[l];
        let lg = &mut grads.layers[l];
        for (r, gr) in g.iter().enumerate() {
            lg.bias[r] += gr;
            let row = &mut lg.weights[r * layer.inputs..(r + 1) * layer.inputs];
            for (w, x) in row.iter_mut().zip(input) {
                *w += gr * x;
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; layer.inputs];
            for (row, gr) in layer.weights.chunks_exact(layer.inputs).zip(&g) {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += f64::from(*w) * gr;
                }
            }
            g = prev;
        }
    }
}

/// Mean query cross-entropy of an episode, where each query is scored by a
/// softmax over negative squared distances to prototypes built from the
/// same forward pass's support embeddings.
pub fn episode_loss(params: &EmbedderParams, episode: &Episode, dropout: DropoutConfig) -> Result<f64> {
    run(params, episode, dropout, false).map(|(loss, _)| loss)
}

/// Exact gradient of [`episode_loss`] for the fixed dropout masks.
pub fn episode_grad(params: &EmbedderParams, episode: &Episode, dropout: DropoutConfig) -> Result<Gradients> {
    run(params, episode, dropout, true).map(|(_, g)| g.expect("gradient requested"))
}

pub fn episode_loss_and_grad(
    params: &EmbedderParams,
    episode: &Episode,
    dropout: DropoutConfig,
) -> Result<(f64, Gradients)> {
    run(params, episode, dropout, true).map(|(loss, g)| (loss, g.expect("gradient requested")))
}

fn run(
    params: &EmbedderParams,
    episode: &Episode,
    dropout: DropoutConfig,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    episode.validate()?;
    let dim = params.output_dim();
    let n_way = episode.n_way();

    let mut traces = Vec::new();
    let mut masks = Vec::new();
    let mut z = Vec::new();
    let examples = episode.support.iter().flatten().chain(episode.query.iter().flatten());
    for (i, x) in examples.enumerate() {
        let trace = forward_trace(params, x)?;
        let mask = dropout.mask(i, dim);
        let out = trace.acts.last().expect("output layer");
        z.push(out.iter().zip(&mask).map(|(v, m)| v * m).collect::<Vec<f64>>());
        if want_grad {
            traces.push(trace);
            masks.push(mask);
        }
    }
    let n_support = n_way * episode.k_support;
    let (z_support, z_query) = z.split_at(n_support);

    let protos: Vec<Vec<f64>> = z_support
        .chunks_exact(episode.k_support)
        .map(|chunk| {
            let mut c = vec![0.0; dim];
            for e in chunk {
                c.iter_mut().zip(e).for_each(|(a, v)| *a += v);
            }
            c.iter_mut().for_each(|a| *a /= episode.k_support as f64);
            c
        })
        .collect();

    let n_query = z_query.len() as f64;
    let mut loss = 0.0;
    let mut grad_z = if want_grad {
        vec![vec![0.0; dim]; z.len()]
    } else {
        Vec::new()
    };
    let mut grad_proto = vec![vec![0.0; dim]; if want_grad { n_way } else { 0 }];

    for (q, zq) in z_query.iter().enumerate() {
        let label = q / episode.k_query;
        let dists: Vec<f64> = protos
            .iter()
            .map(|c| zq.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = dists.iter().map(|d| (min - d).exp()).collect();
        let total: f64 = weights.iter().sum();
        // -log p = d_label - min + log(total)
        loss += dists[label] - min + total.ln();

        if want_grad {
            let gq = &mut grad_z[n_support + q];
            for (j, c) in protos.iter().enumerate() {
                let p = weights[j] / total;
                let coeff = (p - if j == label { 1.0 } else { 0.0 }) / n_query;
                // dL/dd_j = -coeff; dd_j/dz_q = 2 (z_q - c_j); dd_j/dc_j = -2 (z_q - c_j)
                for ((g, gp), (a, b)) in gq.iter_mut().zip(grad_proto[j].iter_mut()).zip(zq.iter().zip(c)) {
                    let diff = 2.0 * (a - b);
                    *g -= coeff * diff;
                    *gp += coeff * diff;
                }
            }
        }
    }
    loss /= n_query;
    if !loss.is_finite() {
        return Err(EmbedError::NonFiniteLoss);
    }
    if !want_grad {
        return Ok((loss, None));
    }

    for (s, g) in grad_z.iter_mut().take(n_support).enumerate() {
        let class = s / episode.k_support;
        for (gs, gp) in g.iter_mut().zip(&grad_proto[class]) {
            *gs = gp / episode.k_support as f64;
        }
    }

    let mut grads = Gradients::zeros_like(params);
    for ((trace, mask), gz) in traces.iter().zip(&masks).zip(grad_z) {
        let g_out: Vec<f64> = gz.iter().zip(mask).map(|(g, m)| g * m).collect();
        backward(params, trace, g_out, &mut grads);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(EmbedError::NonFiniteLoss);
    }
    Ok((loss, Some(grads)))
}
