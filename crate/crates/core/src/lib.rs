//! Federated prototype learning.
//!
//! Clients embed few-shot examples with a shared embedder, summarize each
//! class as a prototype (mean embedding plus count), and report those
//! prototypes to a server that folds them into a global store with an
//! online mean update. The merged store is broadcast back to every client.
//!
//! - [`proto`]: prototype math and nearest-prototype classification.
//! - [`embedder`]: embedding functions and episodic pretraining.
//! - [`federation`]: client/server state machines, wire format, TCP service.
//! - [`benchmark`]: synthetic data, mission scheduling, baselines, metrics.

pub(crate) mod codec;

pub mod benchmark;
pub mod embedder;
pub mod federation;
pub mod proto;
