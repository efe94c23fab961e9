use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};

use super::{BenchmarkConfig, BenchmarkError, LabeledDataset, Result};
use crate::embedder::ClassExamples;
use crate::proto::ClassId;

/// Train-pool indices handed to one client for one mission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientAssignment {
    pub client_id: u32,
    pub examples: BTreeMap<ClassId, Vec<usize>>,
}

impl ClientAssignment {
    pub fn n_examples(&self) -> usize {
        self.examples.values().map(Vec::len).sum()
    }

    pub fn materialize(&self, dataset: &LabeledDataset) -> Result<ClassExamples> {
        self.examples
            .iter()
            .map(|(c, idx)| {
                let pool = &dataset
                    .class(*c)
                    .ok_or_else(|| BenchmarkError::Dataset(format!("class {c} not in dataset")))?
                    .train;
                Ok((*c, idx.iter().map(|&i| pool[i].clone()).collect()))
            })
            .collect()
    }
}

/// One mission; clients run in the listed order. `index` starts at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mission {
    pub index: usize,
    pub assignments: Vec<ClientAssignment>,
}

/// Draws missions until every field class's train pool is drained or the
/// horizon is reached. Each client takes up to `classes_per_mission` distinct
/// classes that still have examples, and up to `shots_per_class` unused
/// examples from each; late missions may be smaller.
pub fn schedule_missions(
    dataset: &LabeledDataset,
    field: &BTreeSet<ClassId>,
    config: &BenchmarkConfig,
) -> Result<Vec<Mission>> {
    config.validate()?;
    if field.is_empty() {
        return Err(BenchmarkError::Dataset("no field classes to schedule".into()));
    }
    let mut rng = super::stream_rng(config.seed, super::STREAM_SCHEDULE);
    let mut pools: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &c in field {
        let n = dataset
            .class(c)
            .ok_or_else(|| BenchmarkError::Dataset(format!("field class {c} not in dataset")))?
            .train
            .len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        // Drawn from the back.
        order.reverse();
        pools.insert(c, order);
    }
    let mut missions = Vec::new();
    while config.missions_horizon.is_none_or(|t| missions.len() < t) {
        let mut assignments = Vec::new();
        for client_id in 0..config.n_clients as u32 {
            let open: Vec<ClassId> = pools.iter().filter(|(_, p)| !p.is_empty()).map(|(c, _)| *c).collect();
            if open.is_empty() {
                break;
            }
            let take = config.classes_per_mission.min(open.len());
            let mut chosen: Vec<ClassId> = index::sample(&mut rng, open.len(), take)
                .into_iter()
                .map(|i| open[i])
                .collect();
            chosen.sort_unstable();
            let mut examples = BTreeMap::new();
            for c in chosen {
                let pool = pools.get_mut(&c).expect("open class");
                let k = config.shots_per_class.min(pool.len());
                let drawn: Vec<usize> = pool.split_off(pool.len() - k).into_iter().rev().collect();
                examples.insert(c, drawn);
            }
            assignments.push(ClientAssignment { client_id, examples });
        }
        if assignments.is_empty() {
            break;
        }
        missions.push(Mission {
            index: missions.len() + 1,
            assignments,
        });
    }
    Ok(missions)
}
