//! Desk-scale evaluation harness: synthetic data, base/field class split,
//! mission scheduling, accuracy metrics and the linear-head baselines.
//!
//! Everything is deterministic given the config seed, the dataset and the
//! embedder. Separate random streams are derived from the seed for the class
//! split, the mission schedule and baseline training, so changing one stage
//! does not perturb the others.

mod config;
mod data;
mod eval;
mod linear;
mod run;
mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embedder::EmbedError;
use crate::federation::FederationError;
use crate::proto::ProtoError;

pub use config::{BenchmarkConfig, ConfigFile, EmbedderConfig, HeadConfig, SgdSchedule, SyntheticSpec};
pub use data::{generate_synthetic, split_base_field, ClassPools, ClassSplit, LabeledDataset};
pub use eval::{
    client_objective_embedded, embed_test_set, eval_client_objective, evaluate, evaluate_embedded, read_results,
    write_results, Accuracy, Classifier, EvalPoint, EvalRecord, TestEmbeddings, RESULTS_HEADER,
};
pub use linear::{train_linear_head, HeadMode, LinearHead};
pub use run::{
    pretrain_embedder, run_benchmark, run_collective_ascent, BenchmarkRun, CollectiveAscent, Deployment, Method,
    RunSummary,
};
pub use schedule::{schedule_missions, ClientAssignment, Mission};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("results: {0}")]
    Results(String),
    #[error("model knows no classes")]
    EmptyModel,
    #[error("baseline training diverged")]
    Diverged,
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchmarkError>;

const STREAM_SPLIT: u64 = 1;
const STREAM_SCHEDULE: u64 = 2;
const STREAM_HEAD: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
