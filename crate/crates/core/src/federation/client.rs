use std::sync::Arc;

use super::{Broadcast, FederationError, MissionReport, Result};
use crate::embedder::{ClassExamples, EmbedderParams};
use crate::proto::{bank_prototypes, batch_centroid, ClassUpdate, EmbeddingBank, PrototypeStore};

/// One client: its view of the class set and the shared embedder.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub store: PrototypeStore,
    /// Present only in the embedding-bank variant.
    pub bank: Option<EmbeddingBank>,
    pub params: Arc<EmbedderParams>,
    pub mission_idx: u32,
}

impl ClientState {
    /// A client with an empty store.
    pub fn new(client_id: u32, params: Arc<EmbedderParams>) -> Result<Self> {
        let store = PrototypeStore::new(params.output_dim())?;
        Ok(ClientState {
            client_id,
            store,
            bank: None,
            params,
            mission_idx: 0,
        })
    }

    /// A client deployed with an initial store (for example the base-class
    /// prototypes computed after pretraining).
    pub fn with_store(client_id: u32, params: Arc<EmbedderParams>, store: PrototypeStore) -> Result<Self> {
        if store.dim() != params.output_dim() {
            return Err(FederationError::DimensionMismatch {
                expected: params.output_dim(),
                got: store.dim(),
            });
        }
        Ok(ClientState {
            client_id,
            store,
            bank: None,
            params,
            mission_idx: 0,
        })
    }

    /// A client in the embedding-bank variant; its store is always derived
    /// from the bank.
    pub fn with_bank(client_id: u32, params: Arc<EmbedderParams>, bank: EmbeddingBank) -> Result<Self> {
        if bank.dim() != params.output_dim() {
            return Err(FederationError::DimensionMismatch {
                expected: params.output_dim(),
                got: bank.dim(),
            });
        }
        let store = bank_prototypes(&bank)?;
        Ok(ClientState {
            client_id,
            store,
            bank: Some(bank),
            params,
            mission_idx: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    /// Learns one mission's data and returns the report for the server. The
    /// same update is folded into the local store first, so in-situ
    /// evaluation sees the new classes.
    pub fn learn(&mut self, data: &ClassExamples) -> Result<MissionReport> {
        self.learn_with_embeddings(data).map(|(report, _)| report)
    }

    /// As [`ClientState::learn`], also returning this mission's embeddings.
    pub fn learn_with_embeddings(&mut self, data: &ClassExamples) -> Result<(MissionReport, EmbeddingBank)> {
        if data.is_empty() {
            return Err(FederationError::EmptyDataset);
        }
        let mut fresh = EmbeddingBank::new(self.dim())?;
        let mut updates = Vec::with_capacity(data.len());
        for (&class_id, examples) in data {
            if examples.is_empty() {
                return Err(FederationError::EmptyClass(class_id));
            }
            let embeddings = self.params.embed_all(examples)?;
            let centroid = batch_centroid(&embeddings)?.into_iter().map(|v| v as f32).collect();
            updates.push(ClassUpdate::new(class_id, centroid, examples.len() as u64)?);
            for e in embeddings {
                fresh.push(class_id, e)?;
            }
        }
        match &mut self.bank {
            Some(bank) => {
                bank.extend_from(&fresh)?;
                self.store = bank_prototypes(bank)?;
            }
            None => self.store.merge(&updates)?,
        }
        let report = MissionReport {
            client_id: self.client_id,
            mission_idx: self.mission_idx,
            updates,
        };
        self.mission_idx += 1;
        Ok((report, fresh))
    }

    /// Replaces the local store with the server's.
    pub fn apply_broadcast(&mut self, broadcast: &Broadcast) -> Result<()> {
        if broadcast.dim as usize != self.dim() {
            return Err(FederationError::DimensionMismatch {
                expected: self.dim(),
                got: broadcast.dim as usize,
            });
        }
        self.store = PrototypeStore::from_prototypes(self.dim(), broadcast.prototypes.iter().cloned())?;
        Ok(())
    }

    /// Replaces the local bank (and derived store) with the server's bank.
    pub fn apply_bank_broadcast(&mut self, bank: &EmbeddingBank) -> Result<()> {
        if self.bank.is_none() {
            return Err(FederationError::NoBank);
        }
        if bank.dim() != self.dim() {
            return Err(FederationError::DimensionMismatch {
                expected: self.dim(),
                got: bank.dim(),
            });
        }
        self.store = bank_prototypes(bank)?;
        self.bank = Some(bank.clone());
        Ok(())
    }
}

pub fn client_learn(client: &mut ClientState, data: &ClassExamples) -> Result<MissionReport> {
    client.learn(data)
}
