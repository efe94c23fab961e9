//! Shared helpers for integration tests: random episodes, the
//! finite-difference gradient oracle, random wire messages and random
//! multi-client report sets with their pooled-mean oracle.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use fedrecon::benchmark::{schedule_missions, split_base_field, BenchmarkConfig, LabeledDataset};
use fedrecon::embedder::{episode_loss, DenseLayer, DropoutConfig, EmbedderParams, Episode, Gradients};
use fedrecon::federation::{
    serve, Broadcast, ClientState, Connection, ErrorCode, ErrorReply, Hello, MergeSummary, Message, MissionReport,
    ServeConfig, ServerState,
};
use fedrecon::proto::{batch_centroid, ClassId, ClassUpdate, Prototype, PrototypeStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_episode(rng: &mut ChaCha8Rng, input_dim: usize) -> Episode {
    let n_way = rng.random_range(2..4);
    let k_support = rng.random_range(1..4);
    let k_query = rng.random_range(1..4);
    let centres: Vec<Vec<f32>> = (0..n_way)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let draw = |k: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f32>>> {
        centres
            .iter()
            .map(|c| {
                (0..k)
                    .map(|_| c.iter().map(|m| m + rng.random_range(-0.5f32..0.5)).collect())
                    .collect()
            })
            .collect()
    };
    let support = draw(k_support, rng);
    let query = draw(k_query, rng);
    Episode {
        classes: (0..n_way as u32).collect(),
        support,
        query,
        k_support,
        k_query,
    }
}

/// Gives every bias a random value so bias gradients are exercised away
/// from the all-zero initialization.
pub fn randomize_biases(params: EmbedderParams, rng: &mut ChaCha8Rng) -> EmbedderParams {
    let layers = params
        .layers()
        .iter()
        .map(|l| DenseLayer {
            bias: l.bias.iter().map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            ..l.clone()
        })
        .collect();
    EmbedderParams::from_layers(params.spec().clone(), layers).unwrap()
}

fn with_param(params: &EmbedderParams, layer: usize, index: usize, value: f32) -> EmbedderParams {
    let mut layers = params.layers().to_vec();
    let l = &mut layers[layer];
    if index < l.weights.len() {
        l.weights[index] = value;
    } else {
        l.bias[index - l.weights.len()] = value;
    }
    EmbedderParams::from_layers(params.spec().clone(), layers).unwrap()
}

/// Central differences in 64-bit. Parameters are stored as `f32`, so each
/// perturbed value is rounded and the quotient uses the actual step
/// `p_plus - p_minus` rather than `2h`.
pub fn finite_difference_grad(params: &EmbedderParams, episode: &Episode, dropout: DropoutConfig, h: f64) -> Gradients {
    let mut out = Gradients::zeros_like(params);
    for (li, layer) in params.layers().iter().enumerate() {
        let n_w = layer.weights.len();
        for idx in 0..n_w + layer.bias.len() {
            let p = if idx < n_w {
                layer.weights[idx]
            } else {
                layer.bias[idx - n_w]
            } as f64;
            let plus = (p + h) as f32;
            let minus = (p - h) as f32;
            let lp = episode_loss(&with_param(params, li, idx, plus), episode, dropout).unwrap();
            let lm = episode_loss(&with_param(params, li, idx, minus), episode, dropout).unwrap();
            let g = (lp - lm) / (plus as f64 - minus as f64);
            if idx < n_w {
                out.layers[li].weights[idx] = g;
            } else {
                out.layers[li].bias[idx - n_w] = g;
            }
        }
    }
    out
}

/// `max |a - n| / max(|a|, |n|, 1e-3)`. With `h = 1e-3` the central
/// difference carries an `O(h^2)` truncation error of roughly `1e-7`, so
/// entries below the floor are judged by absolute error instead.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Finite `f32` drawn from a mix of ordinary, tiny and huge magnitudes.
pub fn wild_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..6) {
        0 => 0.0,
        1 => -0.0,
        2 => f32::from_bits(rng.random_range(1..0x0080_0000)),
        3 => rng.random_range(-1e30f32..1e30),
        4 => [f32::MAX, f32::MIN, f32::MIN_POSITIVE, f32::EPSILON][rng.random_range(0..4)],
        _ => rng.random_range(-10.0f32..10.0),
    }
}

fn vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| wild_f32(rng)).collect()
}

fn distinct_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClassId> {
    let mut ids = Vec::with_capacity(n);
    while ids.len() < n {
        let id = rng.random();
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids
}

/// Any message kind, with dims up to 64 and up to 50 entries.
pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.random_range(0..6) {
        0 => Message::Hello(Hello {
            protocol_version: rng.random(),
            client_id: rng.random(),
            dim: rng.random(),
        }),
        1 => {
            let n = rng.random_range(0..=50);
            let dim = rng.random_range(0..=64);
            let updates = distinct_ids(rng, n)
                .into_iter()
                .map(|c| ClassUpdate {
                    class_id: c,
                    centroid: vector(rng, dim),
                    count: rng.random_range(1..=u64::MAX),
                })
                .collect();
            Message::Report(MissionReport {
                client_id: rng.random(),
                mission_idx: rng.random(),
                updates,
            })
        }
        2 => Message::SyncRequest {
            client_id: rng.random(),
        },
        3 => {
            let n = rng.random_range(0..=50);
            let dim = rng.random_range(1..=64);
            let prototypes = distinct_ids(rng, n)
                .into_iter()
                .map(|c| Prototype::new(c, vector(rng, dim), rng.random_range(1..=u64::MAX)).unwrap())
                .collect();
            Message::Broadcast(Broadcast {
                mission_counter: rng.random(),
                dim: dim as u32,
                prototypes,
            })
        }
        4 => {
            let n = rng.random_range(0..=50);
            Message::Ack(MergeSummary {
                client_id: rng.random(),
                mission_idx: rng.random(),
                duplicate: rng.random(),
                inserted: rng.random(),
                updated: rng.random(),
                reported_count: rng.random(),
                divergence: (0..n).map(|_| (rng.random(), wild_f32(rng))).collect(),
            })
        }
        _ => {
            let len = rng.random_range(0..40);
            let message: String = (0..len).map(|_| rng.random::<char>()).collect();
            Message::Error(ErrorReply {
                code: ErrorCode::from_code(rng.random_range(0..8)),
                message,
            })
        }
    }
}

/// A set of reports from several clients plus every raw embedding per
/// class, for comparing merged stores against pooled means.
pub struct MergeCase {
    pub dim: usize,
    pub reports: Vec<MissionReport>,
    pub pooled: BTreeMap<ClassId, Vec<Vec<f32>>>,
}

impl MergeCase {
    pub fn oracle(&self) -> BTreeMap<ClassId, (Vec<f64>, u64)> {
        self.pooled
            .iter()
            .map(|(c, xs)| (*c, (batch_centroid(xs).unwrap(), xs.len() as u64)))
            .collect()
    }
}

/// Up to `max_batches` batches spread over up to `max_clients` clients, each
/// batch covering a few of `n_classes` classes with up to `max_per_class`
/// examples drawn around per-class centres of scale ~1.
pub fn random_merge_case(
    rng: &mut ChaCha8Rng,
    max_dim: usize,
    max_batches: usize,
    max_clients: u32,
    max_per_class: usize,
) -> MergeCase {
    let dim = rng.random_range(1..=max_dim);
    let n_classes = rng.random_range(1..=6u32);
    let centres: Vec<Vec<f32>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let n_clients = rng.random_range(1..=max_clients);
    let mut missions = vec![0u32; n_clients as usize];
    let mut pooled: BTreeMap<ClassId, Vec<Vec<f32>>> = BTreeMap::new();
    let mut reports = Vec::new();
    for _ in 0..rng.random_range(1..=max_batches) {
        let client = rng.random_range(0..n_clients);
        let mut classes: Vec<ClassId> = (0..n_classes).collect();
        classes.shuffle(rng);
        classes.truncate(rng.random_range(1..=n_classes as usize));
        classes.sort_unstable();
        let mut updates = Vec::new();
        for c in classes {
            let n = rng.random_range(1..=max_per_class);
            let xs: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    centres[c as usize]
                        .iter()
                        .map(|m| m + rng.random_range(-1.0f32..1.0))
                        .collect()
                })
                .collect();
            let centroid = batch_centroid(&xs).unwrap().into_iter().map(|v| v as f32).collect();
            updates.push(ClassUpdate::new(c, centroid, n as u64).unwrap());
            pooled.entry(c).or_default().extend(xs);
        }
        let m = &mut missions[client as usize];
        reports.push(MissionReport {
            client_id: client,
            mission_idx: *m,
            updates,
        });
        *m += 1;
    }
    MergeCase { dim, reports, pooled }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    Loopback,
}

/// Final server and client stores of a federated run over the benchmark
/// schedule. Every client reports in schedule order; after each mission all
/// clients adopt the server's broadcast.
pub struct FederatedOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

pub fn federated_run(
    dataset: &LabeledDataset,
    config: &BenchmarkConfig,
    params: Arc<fedrecon::embedder::EmbedderParams>,
    transport: Transport,
) -> FederatedOutcome {
    let split = split_base_field(dataset, config).unwrap();
    let missions = schedule_missions(dataset, &split.field, config).unwrap();
    let dim = params.output_dim();
    let base = if split.base.is_empty() {
        PrototypeStore::new(dim).unwrap()
    } else {
        let mut learner = ClientState::new(u32::MAX, params.clone()).unwrap();
        learner.learn(&dataset.train_examples(&split.base)).unwrap();
        learner.store
    };
    let mut clients: Vec<ClientState> = (0..config.n_clients as u32)
        .map(|id| ClientState::with_store(id, params.clone(), base.clone()).unwrap())
        .collect();
    let mut server = ServerState::with_store(base);
    match transport {
        Transport::InProcess => {
            for m in &missions {
                for a in &m.assignments {
                    let c = &mut clients[a.client_id as usize];
                    let report = c.learn(&a.materialize(dataset).unwrap()).unwrap();
                    server.merge(&report).unwrap();
                }
                let b = server.make_broadcast();
                for c in &mut clients {
                    c.apply_broadcast(&b).unwrap();
                }
            }
        }
        Transport::Loopback => {
            let handle = serve("127.0.0.1:0", server, ServeConfig::default()).unwrap();
            let mut conns: Vec<Connection> = clients
                .iter()
                .map(|c| Connection::connect(handle.local_addr(), c.client_id, dim).unwrap())
                .collect();
            for m in &missions {
                for a in &m.assignments {
                    let i = a.client_id as usize;
                    let report = clients[i].learn(&a.materialize(dataset).unwrap()).unwrap();
                    conns[i].report(&report).unwrap();
                }
                for (c, conn) in clients.iter_mut().zip(&mut conns) {
                    c.apply_broadcast(&conn.sync().unwrap()).unwrap();
                }
            }
            drop(conns);
            server = handle.shutdown();
        }
    }
    FederatedOutcome { server, clients }
}

/// Bitwise equality of two stores, including the sign of zero.
pub fn stores_bit_identical(a: &PrototypeStore, b: &PrototypeStore) -> bool {
    a.dim() == b.dim()
        && a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(p, q)| {
            p.class_id() == q.class_id()
                && p.count() == q.count()
                && p.mean().iter().zip(q.mean()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
