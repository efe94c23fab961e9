use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use super::{BenchmarkError, ClassSplit, LabeledDataset, LinearHead, Result};
use crate::embedder::EmbedderParams;
use crate::federation::ClientState;
use crate::proto::{classify_probs, predict, ClassId, Embedding, PrototypeStore};

/// Anything that maps an embedding to one of its known classes.
pub trait Classifier {
    fn known_classes(&self) -> BTreeSet<ClassId>;
    fn classify(&self, embedding: &[f32]) -> Result<ClassId>;
}

impl Classifier for PrototypeStore {
    fn known_classes(&self) -> BTreeSet<ClassId> {
        self.class_ids().collect()
    }

    fn classify(&self, embedding: &[f32]) -> Result<ClassId> {
        Ok(predict(embedding, self)?)
    }
}

impl Classifier for LinearHead {
    fn known_classes(&self) -> BTreeSet<ClassId> {
        self.classes().iter().copied().collect()
    }

    fn classify(&self, embedding: &[f32]) -> Result<ClassId> {
        self.predict(embedding)
    }
}

/// Test pools after embedding.
pub type TestEmbeddings = BTreeMap<ClassId, Vec<Embedding>>;

pub fn embed_test_set(params: &EmbedderParams, dataset: &LabeledDataset) -> Result<TestEmbeddings> {
    dataset
        .iter()
        .map(|(c, pools)| Ok((c, params.embed_all(&pools.test)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalPoint {
    /// The deployed model before any mission.
    PreMission,
    ClientInSitu,
    PostMerge,
}

impl EvalPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalPoint::PreMission => "pre_mission",
            EvalPoint::ClientInSitu => "client_in_situ",
            EvalPoint::PostMerge => "post_merge",
        }
    }
}

impl fmt::Display for EvalPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalPoint {
    type Err = BenchmarkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_mission" => Ok(EvalPoint::PreMission),
            "client_in_situ" => Ok(EvalPoint::ClientInSitu),
            "post_merge" => Ok(EvalPoint::PostMerge),
            _ => Err(BenchmarkError::Results(format!("unknown eval point {s:?}"))),
        }
    }
}

/// Accuracy over a class set, split into base and field parts. A part is
/// `None` when the set has no class on that side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub n_classes: usize,
    pub acc_base: Option<f64>,
    pub acc_field: Option<f64>,
    pub acc_avg: f64,
}

impl Accuracy {
    /// Mean of the two parts, or the defined part alone.
    pub fn from_parts(n_classes: usize, acc_base: Option<f64>, acc_field: Option<f64>) -> Result<Self> {
        let acc_avg = match (acc_base, acc_field) {
            (Some(b), Some(f)) => (b + f) / 2.0,
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => return Err(BenchmarkError::EmptyModel),
        };
        Ok(Accuracy {
            n_classes,
            acc_base,
            acc_field,
            acc_avg,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub mission: usize,
    pub eval_point: EvalPoint,
    pub client_id: Option<u32>,
    pub n_classes_seen: usize,
    pub acc_base: Option<f64>,
    pub acc_field: Option<f64>,
    pub acc_avg: f64,
}

impl EvalRecord {
    pub fn new(mission: usize, eval_point: EvalPoint, client_id: Option<u32>, acc: Accuracy) -> Self {
        EvalRecord {
            mission,
            eval_point,
            client_id,
            n_classes_seen: acc.n_classes,
            acc_base: acc.acc_base,
            acc_field: acc.acc_field,
            acc_avg: acc.acc_avg,
        }
    }
}

/// Fraction of test examples of `classes` that `model` labels correctly,
/// counted separately over base and field classes.
pub fn evaluate_embedded(
    model: &dyn Classifier,
    test: &TestEmbeddings,
    classes: &BTreeSet<ClassId>,
    split: &ClassSplit,
) -> Result<Accuracy> {
    if classes.is_empty() {
        return Err(BenchmarkError::EmptyModel);
    }
    // (hits, total) for base and field.
    let mut tally = [(0usize, 0usize); 2];
    for &c in classes {
        let xs = test
            .get(&c)
            .filter(|xs| !xs.is_empty())
            .ok_or_else(|| BenchmarkError::Dataset(format!("class {c} has no test examples")))?;
        let side = &mut tally[usize::from(!split.is_base(c))];
        for x in xs {
            side.0 += usize::from(model.classify(x)? == c);
            side.1 += 1;
        }
    }
    let frac = |(hit, n): (usize, usize)| (n > 0).then(|| hit as f64 / n as f64);
    Accuracy::from_parts(classes.len(), frac(tally[0]), frac(tally[1]))
}

/// Embeds the test pools of `classes` and scores `model` on them.
pub fn evaluate(
    model: &dyn Classifier,
    params: &EmbedderParams,
    dataset: &LabeledDataset,
    classes: &BTreeSet<ClassId>,
    split: &ClassSplit,
) -> Result<Accuracy> {
    let test = classes
        .iter()
        .map(|&c| {
            let pools = dataset
                .class(c)
                .ok_or_else(|| BenchmarkError::Dataset(format!("class {c} not in dataset")))?;
            Ok((c, params.embed_all(&pools.test)?))
        })
        .collect::<Result<TestEmbeddings>>()?;
    evaluate_embedded(model, &test, classes, split)
}

/// Mean cross-entropy of each store on the test examples of its own
/// classes, averaged per example, then per class, then per store.
pub fn client_objective_embedded(stores: &[&PrototypeStore], test: &TestEmbeddings) -> Result<f64> {
    if stores.is_empty() {
        return Err(BenchmarkError::EmptyModel);
    }
    let mut total = 0.0;
    for store in stores {
        if store.is_empty() {
            return Err(BenchmarkError::EmptyModel);
        }
        let mut per_class = 0.0;
        for c in store.class_ids() {
            let xs = test
                .get(&c)
                .filter(|xs| !xs.is_empty())
                .ok_or_else(|| BenchmarkError::Dataset(format!("class {c} has no test examples")))?;
            let mut loss = 0.0;
            for x in xs {
                let p = classify_probs(x, store)?[&c];
                loss -= p.ln();
            }
            per_class += loss / xs.len() as f64;
        }
        total += per_class / store.len() as f64;
    }
    Ok(total / stores.len() as f64)
}

pub fn eval_client_objective(clients: &[ClientState], dataset: &LabeledDataset) -> Result<f64> {
    let mut total = 0.0;
    for client in clients {
        let test = client
            .store
            .class_ids()
            .map(|c| {
                let pools = dataset
                    .class(c)
                    .ok_or_else(|| BenchmarkError::Dataset(format!("class {c} not in dataset")))?;
                Ok((c, client.params.embed_all(&pools.test)?))
            })
            .collect::<Result<TestEmbeddings>>()?;
        total += client_objective_embedded(&[&client.store], &test)?;
    }
    if clients.is_empty() {
        return Err(BenchmarkError::EmptyModel);
    }
    Ok(total / clients.len() as f64)
}

pub const RESULTS_HEADER: [&str; 7] = [
    "mission",
    "eval_point",
    "client_id",
    "n_classes_seen",
    "acc_base",
    "acc_field",
    "acc_avg",
];

/// Results table; undefined fields are left empty.
pub fn write_results<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in records {
        w.write_record([
            r.mission.to_string(),
            r.eval_point.to_string(),
            r.client_id.map(|c| c.to_string()).unwrap_or_default(),
            r.n_classes_seen.to_string(),
            opt(r.acc_base),
            opt(r.acc_field),
            format!("{:.6}", r.acc_avg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(input: R) -> Result<Vec<EvalRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    if reader.headers()?.iter().ne(RESULTS_HEADER) {
        return Err(BenchmarkError::Results(format!(
            "header must be {}",
            RESULTS_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |m: &str| BenchmarkError::Results(format!("row {row}: {m}"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let acc = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            match s.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok(Some(v)),
                _ => Err(bad("accuracy must be in [0, 1]")),
            }
        };
        out.push(EvalRecord {
            mission: int(&rec[0])?,
            eval_point: rec[1].parse()?,
            client_id: if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse().map_err(|_| bad("bad client_id"))?)
            },
            n_classes_seen: int(&rec[3])?,
            acc_base: acc(&rec[4])?,
            acc_field: acc(&rec[5])?,
            acc_avg: acc(&rec[6])?.ok_or_else(|| bad("acc_avg missing"))?,
        });
    }
    Ok(out)
}
