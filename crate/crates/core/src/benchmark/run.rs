use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info};

use super::{
    client_objective_embedded, embed_test_set, evaluate_embedded, schedule_missions, split_base_field, BenchmarkConfig,
    BenchmarkError, ClassSplit, Classifier, EmbedderConfig, EvalPoint, EvalRecord, HeadConfig, LabeledDataset,
    LinearHead, Mission, Result, TestEmbeddings,
};
use crate::embedder::{pretrain, ClassExamples, EmbedderParams, PretrainConfig, PretrainOutcome};
use crate::federation::{BankReport, ClientState, ServerState};
use crate::proto::{bank_prototypes, batch_centroid, ClassId, ClassUpdate, Embedding, EmbeddingBank, PrototypeStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Prototype store with online mean merging.
    ProtoOnline,
    /// Prototype store recomputed from every stored embedding.
    ProtoBank,
    /// One linear head fine-tuned on each client's new classes in turn.
    Lower,
    /// Linear head trained jointly on all data, evaluated once at the end.
    Upper,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ProtoOnline, Method::ProtoBank, Method::Lower, Method::Upper];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ProtoOnline => "proto_online",
            Method::ProtoBank => "proto_bank",
            Method::Lower => "lower",
            Method::Upper => "upper",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = BenchmarkError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BenchmarkError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub n_missions: usize,
    /// Base accuracy of the deployed model before any mission.
    pub pre_acc_base: Option<f64>,
    pub final_acc_base: Option<f64>,
    pub final_acc_field: Option<f64>,
    pub final_acc_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub method: Method,
    pub records: Vec<EvalRecord>,
    /// Fleet objective after each mission's client learning (prototype
    /// methods only).
    pub objectives: Vec<f64>,
    /// Field training examples handed to clients.
    pub examples_consumed: usize,
    pub summary: RunSummary,
}

impl BenchmarkRun {
    pub fn post_merge(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(|r| r.eval_point == EvalPoint::PostMerge)
    }
}

/// Episodic pretraining on the base classes' training pools. With no base
/// classes the embedder keeps its initialization.
pub fn pretrain_embedder(
    dataset: &LabeledDataset,
    config: &BenchmarkConfig,
    embedder: &EmbedderConfig,
    pretrain_config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let data = dataset.truncated(config.train_examples_per_class, config.test_examples_per_class);
    let split = split_base_field(&data, config)?;
    let spec = embedder.to_spec(data.input_dim())?;
    if split.base.is_empty() {
        return Ok(PretrainOutcome {
            params: EmbedderParams::init(spec)?,
            loss_trace: Vec::new(),
        });
    }
    Ok(pretrain(&data.train_examples(&split.base), spec, pretrain_config)?)
}

fn store_from_embeddings(dim: usize, embeddings: BTreeMap<ClassId, Vec<Embedding>>) -> Result<PrototypeStore> {
    let mut store = PrototypeStore::new(dim)?;
    let updates = embeddings
        .into_iter()
        .map(|(c, e)| {
            let centroid = batch_centroid(&e)?.into_iter().map(|v| v as f32).collect();
            ClassUpdate::new(c, centroid, e.len() as u64)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    store.merge(&updates)?;
    Ok(store)
}

/// The benchmark schedule as seen by a deployed server and its clients:
/// the base-class prototypes everyone starts from, and each mission's data.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub split: ClassSplit,
    pub base_store: PrototypeStore,
    pub missions: Vec<Vec<(u32, ClassExamples)>>,
}

impl Deployment {
    /// Splits, schedules and embeds exactly as [`run_benchmark`] does.
    pub fn plan(dataset: &LabeledDataset, config: &BenchmarkConfig, params: &EmbedderParams) -> Result<Self> {
        config.validate()?;
        let data = dataset.truncated(config.train_examples_per_class, config.test_examples_per_class);
        let split = split_base_field(&data, config)?;
        let missions = schedule_missions(&data, &split.field, config)?
            .iter()
            .map(|m| {
                m.assignments
                    .iter()
                    .map(|a| Ok((a.client_id, a.materialize(&data)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let base = split
            .base
            .iter()
            .map(|&c| {
                Ok((
                    c,
                    params.embed_all(&data.class(c).expect("base class in dataset").train)?,
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let base_store = store_from_embeddings(params.output_dim(), base)?;
        Ok(Deployment {
            split,
            base_store,
            missions,
        })
    }

    /// One client's share of every mission, in order; missions where the
    /// client has no assignment are skipped.
    pub fn client_missions(&self, client_id: u32) -> Vec<ClassExamples> {
        self.missions
            .iter()
            .flat_map(|m| m.iter().filter(|(id, _)| *id == client_id).map(|(_, d)| d.clone()))
            .collect()
    }
}

struct Harness<'a> {
    data: LabeledDataset,
    split: ClassSplit,
    missions: Vec<Mission>,
    test: TestEmbeddings,
    params: Arc<EmbedderParams>,
    config: &'a BenchmarkConfig,
    records: Vec<EvalRecord>,
}

impl Harness<'_> {
    fn record(&mut self, mission: usize, point: EvalPoint, client: Option<u32>, model: &dyn Classifier) -> Result<()> {
        let acc = evaluate_embedded(model, &self.test, &model.known_classes(), &self.split)?;
        debug!(
            "mission {mission} {point} client {client:?}: base {:?} field {:?} avg {:.4}",
            acc.acc_base, acc.acc_field, acc.acc_avg
        );
        self.records.push(EvalRecord::new(mission, point, client, acc));
        Ok(())
    }

    fn base_embeddings(&self) -> Result<BTreeMap<ClassId, Vec<Embedding>>> {
        self.split
            .base
            .iter()
            .map(|&c| {
                let pools = self.data.class(c).expect("base class in dataset");
                Ok((c, self.params.embed_all(&pools.train)?))
            })
            .collect()
    }

    fn mission_data(&self, mission: &Mission) -> Result<Vec<(u32, ClassExamples)>> {
        mission
            .assignments
            .iter()
            .map(|a| Ok((a.client_id, a.materialize(&self.data)?)))
            .collect()
    }

    fn base_store(&self) -> Result<PrototypeStore> {
        store_from_embeddings(self.params.output_dim(), self.base_embeddings()?)
    }

    fn objective(&self, clients: &[ClientState]) -> Result<Option<f64>> {
        let stores: Vec<&PrototypeStore> = clients.iter().map(|c| &c.store).filter(|s| !s.is_empty()).collect();
        if stores.is_empty() {
            return Ok(None);
        }
        client_objective_embedded(&stores, &self.test).map(Some)
    }

    fn proto_online(&mut self, objectives: &mut Vec<f64>) -> Result<()> {
        let base = self.base_store()?;
        let mut server = ServerState::with_store(base.clone());
        let mut clients = (0..self.config.n_clients as u32)
            .map(|id| ClientState::with_store(id, self.params.clone(), base.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if !base.is_empty() {
            self.record(0, EvalPoint::PreMission, None, &server.store)?;
        }
        for mission in self.missions.clone() {
            for (id, data) in self.mission_data(&mission)? {
                let client = &mut clients[id as usize];
                let report = client.learn(&data)?;
                let store = client.store.clone();
                self.record(mission.index, EvalPoint::ClientInSitu, Some(id), &store)?;
                server.merge(&report)?;
            }
            objectives.extend(self.objective(&clients)?);
            let broadcast = server.make_broadcast();
            for c in &mut clients {
                c.apply_broadcast(&broadcast)?;
            }
            self.record(mission.index, EvalPoint::PostMerge, None, &server.store)?;
        }
        Ok(())
    }

    fn proto_bank(&mut self, objectives: &mut Vec<f64>) -> Result<()> {
        let mut bank = EmbeddingBank::new(self.params.output_dim())?;
        for (c, es) in self.base_embeddings()? {
            for e in es {
                bank.push(c, e)?;
            }
        }
        let mut server = ServerState::with_bank(bank.clone())?;
        let mut clients = (0..self.config.n_clients as u32)
            .map(|id| ClientState::with_bank(id, self.params.clone(), bank.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if !bank.is_empty() {
            self.record(0, EvalPoint::PreMission, None, &bank_prototypes(&bank)?)?;
        }
        for mission in self.missions.clone() {
            for (id, data) in self.mission_data(&mission)? {
                let client = &mut clients[id as usize];
                let mission_idx = client.mission_idx;
                let (_, embeddings) = client.learn_with_embeddings(&data)?;
                let store = client.store.clone();
                self.record(mission.index, EvalPoint::ClientInSitu, Some(id), &store)?;
                server.merge_bank(&BankReport {
                    client_id: id,
                    mission_idx,
                    embeddings,
                })?;
            }
            objectives.extend(self.objective(&clients)?);
            let bank = server.bank().expect("bank server").clone();
            for c in &mut clients {
                c.apply_bank_broadcast(&bank)?;
            }
            self.record(mission.index, EvalPoint::PostMerge, None, &server.store)?;
        }
        Ok(())
    }

    fn embed_examples(&self, data: &ClassExamples) -> Result<BTreeMap<ClassId, Vec<Embedding>>> {
        data.iter()
            .map(|(c, xs)| Ok((*c, self.params.embed_all(xs)?)))
            .collect()
    }

    fn lower(&mut self, head_config: &HeadConfig) -> Result<()> {
        let mut rng = super::stream_rng(self.config.seed, super::STREAM_HEAD);
        let mut head = LinearHead::new(self.params.output_dim());
        let base = self.base_embeddings()?;
        if !base.is_empty() {
            head.fit(&base, &head_config.joint, &mut rng)?;
            self.record(0, EvalPoint::PreMission, None, &head)?;
        }
        for mission in self.missions.clone() {
            for (id, data) in self.mission_data(&mission)? {
                let features = self.embed_examples(&data)?;
                head.fit(&features, &head_config.new_only, &mut rng)?;
                self.record(mission.index, EvalPoint::ClientInSitu, Some(id), &head)?;
            }
            self.record(mission.index, EvalPoint::PostMerge, None, &head)?;
        }
        Ok(())
    }

    fn upper(&mut self, head_config: &HeadConfig) -> Result<()> {
        let mut rng = super::stream_rng(self.config.seed, super::STREAM_HEAD);
        let mut features = self.base_embeddings()?;
        for mission in self.missions.clone() {
            for (_, data) in self.mission_data(&mission)? {
                for (c, es) in self.embed_examples(&data)? {
                    features.entry(c).or_default().extend(es);
                }
            }
        }
        let mut head = LinearHead::new(self.params.output_dim());
        head.fit(&features, &head_config.joint, &mut rng)?;
        let last = self.missions.last().map_or(0, |m| m.index);
        self.record(last, EvalPoint::PostMerge, None, &head)
    }
}

/// Runs one method over the mission schedule with a pretrained, frozen
/// embedder.
pub fn run_benchmark(
    config: &BenchmarkConfig,
    head_config: &HeadConfig,
    dataset: &LabeledDataset,
    params: Arc<EmbedderParams>,
    method: Method,
) -> Result<BenchmarkRun> {
    config.validate()?;
    head_config.validate()?;
    if params.input_dim() != dataset.input_dim() {
        return Err(BenchmarkError::Dataset(format!(
            "embedder expects {} features, dataset has {}",
            params.input_dim(),
            dataset.input_dim()
        )));
    }
    let data = dataset.truncated(config.train_examples_per_class, config.test_examples_per_class);
    let split = split_base_field(&data, config)?;
    let missions = schedule_missions(&data, &split.field, config)?;
    let test = embed_test_set(&params, &data)?;
    let examples_consumed = missions
        .iter()
        .flat_map(|m| &m.assignments)
        .map(|a| a.n_examples())
        .sum();
    let mut h = Harness {
        data,
        split,
        missions,
        test,
        params,
        config,
        records: Vec::new(),
    };
    let mut objectives = Vec::new();
    match method {
        Method::ProtoOnline => h.proto_online(&mut objectives)?,
        Method::ProtoBank => h.proto_bank(&mut objectives)?,
        Method::Lower => h.lower(head_config)?,
        Method::Upper => h.upper(head_config)?,
    }
    let pre_acc_base = h
        .records
        .iter()
        .find(|r| r.eval_point == EvalPoint::PreMission)
        .and_then(|r| r.acc_base);
    let last = h
        .records
        .iter()
        .rev()
        .find(|r| r.eval_point == EvalPoint::PostMerge)
        .or_else(|| h.records.last())
        .ok_or_else(|| BenchmarkError::Dataset("no missions were scheduled".into()))?;
    let summary = RunSummary {
        n_missions: h.missions.len(),
        pre_acc_base,
        final_acc_base: last.acc_base,
        final_acc_field: last.acc_field,
        final_acc_avg: last.acc_avg,
    };
    info!(
        "{method}: {} missions, final acc_avg {:.4}",
        summary.n_missions, summary.final_acc_avg
    );
    Ok(BenchmarkRun {
        method,
        records: h.records,
        objectives,
        examples_consumed,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveAscent {
    /// Post-merge records, one per mission.
    pub series: Vec<EvalRecord>,
    /// Whether the last post-merge acc_avg beats the first.
    pub ascended: bool,
    pub run: BenchmarkRun,
}

/// `proto_online` with five shots per class per mission.
pub fn run_collective_ascent(
    config: &BenchmarkConfig,
    dataset: &LabeledDataset,
    params: Arc<EmbedderParams>,
) -> Result<CollectiveAscent> {
    let config = config.clone().collective_ascent();
    let run = run_benchmark(&config, &HeadConfig::default(), dataset, params, Method::ProtoOnline)?;
    let series: Vec<EvalRecord> = run.post_merge().cloned().collect();
    let ascended = match (series.first(), series.last()) {
        (Some(a), Some(b)) => b.acc_avg > a.acc_avg,
        _ => false,
    };
    Ok(CollectiveAscent { series, ascended, run })
}
