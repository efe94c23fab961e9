use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BenchmarkConfig, BenchmarkError, Result, SyntheticSpec};
use crate::embedder::ClassExamples;
use crate::proto::ClassId;

/// Train and test pools of one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassPools {
    pub train: Vec<Vec<f32>>,
    pub test: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    input_dim: usize,
    classes: BTreeMap<ClassId, ClassPools>,
}

impl LabeledDataset {
    /// Checks that every vector has `input_dim` finite entries and every
    /// class has both pools non-empty.
    pub fn new(input_dim: usize, classes: BTreeMap<ClassId, ClassPools>) -> Result<Self> {
        if input_dim == 0 {
            return Err(BenchmarkError::Dataset("input_dim must be positive".into()));
        }
        if classes.is_empty() {
            return Err(BenchmarkError::Dataset("no classes".into()));
        }
        for (id, pools) in &classes {
            if pools.train.is_empty() || pools.test.is_empty() {
                return Err(BenchmarkError::Dataset(format!(
                    "class {id} needs train and test examples"
                )));
            }
            for x in pools.train.iter().chain(&pools.test) {
                if x.len() != input_dim {
                    return Err(BenchmarkError::Dataset(format!(
                        "class {id}: row has {} features, expected {input_dim}",
                        x.len()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(BenchmarkError::Dataset(format!("class {id}: non-finite feature")));
                }
            }
        }
        Ok(LabeledDataset { input_dim, classes })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    pub fn class(&self, id: ClassId) -> Option<&ClassPools> {
        self.classes.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &ClassPools)> {
        self.classes.iter().map(|(k, v)| (*k, v))
    }

    /// Keeps at most `train` / `test` examples per class.
    pub fn truncated(&self, train: Option<usize>, test: Option<usize>) -> Self {
        let cut = |v: &Vec<Vec<f32>>, n: Option<usize>| v[..n.map_or(v.len(), |n| n.min(v.len()))].to_vec();
        LabeledDataset {
            input_dim: self.input_dim,
            classes: self
                .classes
                .iter()
                .map(|(k, p)| {
                    let pools = ClassPools {
                        train: cut(&p.train, train),
                        test: cut(&p.test, test),
                    };
                    (*k, pools)
                })
                .collect(),
        }
    }

    /// Training pools of `classes`, for pretraining or joint fitting.
    pub fn train_examples(&self, classes: &BTreeSet<ClassId>) -> ClassExamples {
        classes
            .iter()
            .filter_map(|c| self.classes.get(c).map(|p| (*c, p.train.clone())))
            .collect()
    }

    /// Reads the `class_id,split,f0,...` text format.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers = reader.headers()?.clone();
        let input_dim = headers.len().saturating_sub(2);
        let header_ok = headers.get(0) == Some("class_id")
            && headers.get(1) == Some("split")
            && headers.iter().skip(2).enumerate().all(|(i, h)| h == format!("f{i}"));
        if !header_ok || input_dim == 0 {
            return Err(BenchmarkError::Dataset("header must be class_id,split,f0,...".into()));
        }
        let mut classes: BTreeMap<ClassId, ClassPools> = BTreeMap::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let row = line + 2;
            let bad = |m: String| BenchmarkError::Dataset(format!("row {row}: {m}"));
            let class_id: ClassId = record[0].trim().parse().map_err(|_| bad("bad class_id".into()))?;
            let features = record
                .iter()
                .skip(2)
                .map(|f| f.trim().parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            let pools = classes.entry(class_id).or_default();
            match record[1].trim() {
                "train" => pools.train.push(features),
                "test" => pools.test.push(features),
                other => return Err(bad(format!("unknown split {other:?}"))),
            }
        }
        Self::new(input_dim, classes)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["class_id".to_string(), "split".to_string()];
        header.extend((0..self.input_dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (id, pools) in &self.classes {
            for (split, rows) in [("train", &pools.train), ("test", &pools.test)] {
                for x in rows {
                    let mut rec = vec![id.to_string(), split.to_string()];
                    rec.extend(x.iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Per-class Gaussian clusters, class ids `0..n_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.std).map_err(|e| BenchmarkError::InvalidConfig(e.to_string()))?;
    let mut classes = BTreeMap::new();
    for id in 0..spec.n_classes as ClassId {
        let mean: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.random_range(-spec.mean_scale..=spec.mean_scale))
            .collect();
        let mut draw = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect())
                .collect()
        };
        let train = draw(spec.train_per_class);
        let test = draw(spec.test_per_class);
        classes.insert(id, ClassPools { train, test });
    }
    LabeledDataset::new(spec.input_dim, classes)
}

/// Disjoint base and field class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub base: BTreeSet<ClassId>,
    pub field: BTreeSet<ClassId>,
}

impl ClassSplit {
    pub fn is_base(&self, c: ClassId) -> bool {
        self.base.contains(&c)
    }
}

/// Seeded random partition with `round(base_fraction * n)` base classes.
pub fn split_base_field(dataset: &LabeledDataset, config: &BenchmarkConfig) -> Result<ClassSplit> {
    config.validate()?;
    if dataset.n_classes() < 2 {
        return Err(BenchmarkError::Dataset("need at least two classes to split".into()));
    }
    let mut ids: Vec<ClassId> = dataset.class_ids().collect();
    let mut rng = super::stream_rng(config.seed, super::STREAM_SPLIT);
    ids.shuffle(&mut rng);
    let n_base = (config.base_fraction * ids.len() as f64).round() as usize;
    let field = ids.split_off(n_base);
    Ok(ClassSplit {
        base: ids.into_iter().collect(),
        field: field.into_iter().collect(),
    })
}
