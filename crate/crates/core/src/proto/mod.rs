//! Prototype mathematics: per-class centroids, online mean updates, store
//! merging and nearest-prototype classification.
//!
//! Everything here is pure. Means are stored as `f32` (the width that goes
//! on the wire) while every sum and update is carried out in `f64`.

mod bank;
mod classify;
mod update;

use std::collections::BTreeMap;

use thiserror::Error;

pub use bank::{bank_prototypes, EmbeddingBank};
pub use classify::{classify_probs, predict, sq_distances};
pub use update::{batch_centroid, merge_store, naive_update, welford_update, ClassUpdate};

/// Identifier of a class, stable across missions.
pub type ClassId = u32;

/// Output of an embedding function.
pub type Embedding = Vec<f32>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("empty support set")]
    EmptySupport,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch count must be at least 1")]
    ZeroCount,
    #[error("duplicate class in update: {0}")]
    DuplicateClass(ClassId),
    #[error("no known classes")]
    EmptyStore,
    #[error("non-finite value in class {0}")]
    NonFinite(ClassId),
    #[error("store dimension must be positive")]
    ZeroDimension,
}

pub type Result<T> = std::result::Result<T, ProtoError>;

/// Running mean of every embedding seen for one class, with the number of
/// embeddings that produced it. A prototype always has `count >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    class_id: ClassId,
    mean: Vec<f32>,
    count: u64,
}

impl Prototype {
    pub fn new(class_id: ClassId, mean: Vec<f32>, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(ProtoError::ZeroCount);
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite(class_id));
        }
        Ok(Prototype { class_id, mean, count })
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Class → prototype map held by clients and by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    dim: usize,
    entries: BTreeMap<ClassId, Prototype>,
}

impl PrototypeStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ProtoError::ZeroDimension);
        }
        Ok(PrototypeStore {
            dim,
            entries: BTreeMap::new(),
        })
    }

    /// Builds a store from prototypes, rejecting wrong dimensions and
    /// repeated class ids.
    pub fn from_prototypes(dim: usize, prototypes: impl IntoIterator<Item = Prototype>) -> Result<Self> {
        let mut store = PrototypeStore::new(dim)?;
        for proto in prototypes {
            store.check_dim(proto.dim())?;
            let id = proto.class_id;
            if store.entries.insert(id, proto).is_some() {
                return Err(ProtoError::DuplicateClass(id));
            }
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class_id: ClassId) -> Option<&Prototype> {
        self.entries.get(&class_id)
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.entries.contains_key(&class_id)
    }

    /// Prototypes in ascending class id order.
    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.entries.values()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn total_count(&self) -> u64 {
        self.entries.values().map(|p| p.count).sum()
    }

    /// Largest elementwise difference between the means of two stores over
    /// the same class set. `None` when the class sets or counts differ.
    pub fn max_abs_diff(&self, other: &PrototypeStore) -> Option<f64> {
        if self.dim != other.dim || self.entries.len() != other.entries.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (id, a) in &self.entries {
            let b = other.entries.get(id)?;
            if a.count != b.count {
                return None;
            }
            for (x, y) in a.mean.iter().zip(&b.mean) {
                worst = worst.max((f64::from(*x) - f64::from(*y)).abs());
            }
        }
        Some(worst)
    }

    pub(crate) fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(ProtoError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    pub(crate) fn insert(&mut self, proto: Prototype) {
        self.entries.insert(proto.class_id, proto);
    }
}
