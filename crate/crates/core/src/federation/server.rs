use std::collections::BTreeSet;
use std::path::Path;

use super::{Broadcast, FederationError, MergeSummary, MissionReport, Result};
use crate::codec::{Reader, Writer};
use crate::proto::{bank_prototypes, ClassId, EmbeddingBank, Prototype, PrototypeStore};

const SNAPSHOT_MAGIC: &[u8; 4] = b"FRST";
const SNAPSHOT_VERSION: u8 = 1;

/// One applied report.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeEvent {
    pub client_id: u32,
    pub mission_idx: u32,
    pub classes: Vec<ClassId>,
    pub reported_count: u64,
}

/// Raw embeddings shipped by a client in the embedding-bank variant.
#[derive(Debug, Clone, PartialEq)]
pub struct BankReport {
    pub client_id: u32,
    pub mission_idx: u32,
    pub embeddings: EmbeddingBank,
}

/// Authoritative merged store. Reports are applied at most once per
/// `(client_id, mission_idx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub store: PrototypeStore,
    applied: BTreeSet<(u32, u32)>,
    mission_log: Vec<MergeEvent>,
    mission_counter: u64,
    bank: Option<EmbeddingBank>,
}

impl ServerState {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self::with_store(PrototypeStore::new(dim)?))
    }

    pub fn with_store(store: PrototypeStore) -> Self {
        ServerState {
            store,
            applied: BTreeSet::new(),
            mission_log: Vec::new(),
            mission_counter: 0,
            bank: None,
        }
    }

    /// Server for the embedding-bank variant.
    pub fn with_bank(bank: EmbeddingBank) -> Result<Self> {
        let store = bank_prototypes(&bank)?;
        Ok(ServerState {
            bank: Some(bank),
            ..Self::with_store(store)
        })
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn bank(&self) -> Option<&EmbeddingBank> {
        self.bank.as_ref()
    }

    pub fn mission_log(&self) -> &[MergeEvent] {
        &self.mission_log
    }

    /// Number of reports applied so far.
    pub fn mission_counter(&self) -> u64 {
        self.mission_counter
    }

    pub fn is_applied(&self, client_id: u32, mission_idx: u32) -> bool {
        self.applied.contains(&(client_id, mission_idx))
    }

    fn duplicate_summary(client_id: u32, mission_idx: u32) -> MergeSummary {
        MergeSummary {
            client_id,
            mission_idx,
            duplicate: true,
            inserted: 0,
            updated: 0,
            reported_count: 0,
            divergence: Vec::new(),
        }
    }

    /// Applies one report. A report whose key was already applied is
    /// acknowledged as a duplicate and changes nothing; an invalid report is
    /// rejected without partial application.
    pub fn merge(&mut self, report: &MissionReport) -> Result<MergeSummary> {
        if self.bank.is_some() {
            return Err(FederationError::Snapshot("bank server takes bank reports".into()));
        }
        if self.is_applied(report.client_id, report.mission_idx) {
            return Ok(Self::duplicate_summary(report.client_id, report.mission_idx));
        }
        let mut inserted = 0;
        let mut updated = 0;
        let mut divergence = Vec::new();
        for u in &report.updates {
            match self.store.get(u.class_id) {
                Some(existing) if existing.dim() == u.centroid.len() => {
                    updated += 1;
                    let d: f64 = existing
                        .mean()
                        .iter()
                        .zip(&u.centroid)
                        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                        .sum();
                    divergence.push((u.class_id, d.sqrt() as f32));
                }
                _ => inserted += 1,
            }
        }
        self.store.merge(&report.updates)?;
        let reported_count = report.updates.iter().map(|u| u.count).sum();
        self.record(
            report.client_id,
            report.mission_idx,
            report.updates.iter().map(|u| u.class_id),
            reported_count,
        );
        Ok(MergeSummary {
            client_id: report.client_id,
            mission_idx: report.mission_idx,
            duplicate: false,
            inserted,
            updated,
            reported_count,
            divergence,
        })
    }

    /// Bank-variant merge: appends the shipped embeddings and recomputes
    /// every prototype exactly.
    pub fn merge_bank(&mut self, report: &BankReport) -> Result<MergeSummary> {
        let bank = self.bank.as_mut().ok_or(FederationError::NoBank)?;
        if self.applied.contains(&(report.client_id, report.mission_idx)) {
            return Ok(Self::duplicate_summary(report.client_id, report.mission_idx));
        }
        let inserted = report
            .embeddings
            .iter()
            .filter(|(id, _)| bank.class_embeddings(*id).is_none())
            .count() as u32;
        let updated = report.embeddings.len() as u32 - inserted;
        bank.extend_from(&report.embeddings)?;
        self.store = bank_prototypes(bank)?;
        let reported_count = report.embeddings.total_embeddings() as u64;
        let classes: Vec<ClassId> = report.embeddings.iter().map(|(id, _)| id).collect();
        self.record(
            report.client_id,
            report.mission_idx,
            classes.into_iter(),
            reported_count,
        );
        Ok(MergeSummary {
            client_id: report.client_id,
            mission_idx: report.mission_idx,
            duplicate: false,
            inserted,
            updated,
            reported_count,
            divergence: Vec::new(),
        })
    }

    fn record(
        &mut self,
        client_id: u32,
        mission_idx: u32,
        classes: impl Iterator<Item = ClassId>,
        reported_count: u64,
    ) {
        self.applied.insert((client_id, mission_idx));
        self.mission_counter += 1;
        self.mission_log.push(MergeEvent {
            client_id,
            mission_idx,
            classes: classes.collect(),
            reported_count,
        });
    }

    pub fn make_broadcast(&self) -> Broadcast {
        Broadcast {
            mission_counter: self.mission_counter,
            dim: self.dim() as u32,
            prototypes: self.store.iter().cloned().collect(),
        }
    }

    /// `FRST` snapshot: magic, version, dim, mission counter, applied keys,
    /// then each prototype as class id, count and mean. The merge log is not
    /// persisted.
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(SNAPSHOT_MAGIC);
        w.u8(SNAPSHOT_VERSION);
        w.u32(self.dim() as u32);
        w.u64(self.mission_counter);
        w.u32(self.applied.len() as u32);
        for (c, m) in &self.applied {
            w.u32(*c);
            w.u32(*m);
        }
        w.u32(self.store.len() as u32);
        for p in self.store.iter() {
            w.u32(p.class_id());
            w.u64(p.count());
            w.f32_slice(p.mean());
        }
        w.buf
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| FederationError::Snapshot(m.to_string());
        let truncated = |_| bad("truncated");
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(truncated)? != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        if r.u8().map_err(truncated)? != SNAPSHOT_VERSION {
            return Err(bad("unknown version"));
        }
        let dim = r.u32().map_err(truncated)? as usize;
        let mission_counter = r.u64().map_err(truncated)?;
        let n_applied = r.u32().map_err(truncated)? as usize;
        if n_applied > r.remaining() / 8 {
            return Err(bad("truncated"));
        }
        let mut applied = BTreeSet::new();
        for _ in 0..n_applied {
            applied.insert((r.u32().map_err(truncated)?, r.u32().map_err(truncated)?));
        }
        let n = r.u32().map_err(truncated)? as usize;
        let mut protos = Vec::new();
        for _ in 0..n {
            let id = r.u32().map_err(truncated)?;
            let count = r.u64().map_err(truncated)?;
            let mean = r.f32_vec(dim).map_err(truncated)?;
            protos.push(Prototype::new(id, mean, count)?);
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(ServerState {
            store: PrototypeStore::from_prototypes(dim, protos)?,
            applied,
            mission_log: Vec::new(),
            mission_counter,
            bank: None,
        })
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_snapshot_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        Self::from_snapshot_bytes(&std::fs::read(path)?)
    }
}

pub fn server_merge(server: &mut ServerState, report: &MissionReport) -> Result<MergeSummary> {
    server.merge(report)
}
