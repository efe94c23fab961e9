use std::collections::BTreeSet;

use super::{ClassId, ProtoError, Prototype, PrototypeStore, Result};

/// Per-class payload of a merge: the centroid of `count` new embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassUpdate {
    pub class_id: ClassId,
    pub centroid: Vec<f32>,
    pub count: u64,
}

impl ClassUpdate {
    pub fn new(class_id: ClassId, centroid: Vec<f32>, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(ProtoError::ZeroCount);
        }
        if centroid.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite(class_id));
        }
        Ok(ClassUpdate {
            class_id,
            centroid,
            count,
        })
    }
}

/// Elementwise arithmetic mean of a non-empty set of equal-length vectors,
/// accumulated in `f64`.
pub fn batch_centroid<E: AsRef<[f32]>>(embeddings: &[E]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or(ProtoError::EmptySupport)?.as_ref();
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for e in embeddings {
        let e = e.as_ref();
        if e.len() != dim {
            return Err(ProtoError::DimensionMismatch {
                expected: dim,
                got: e.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(e) {
            *a += f64::from(*v);
        }
    }
    let n = embeddings.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn check_update(proto: &Prototype, batch_mean: &[f32], batch_count: u64) -> Result<u64> {
    if batch_count == 0 {
        return Err(ProtoError::ZeroCount);
    }
    if batch_mean.len() != proto.dim() {
        return Err(ProtoError::DimensionMismatch {
            expected: proto.dim(),
            got: batch_mean.len(),
        });
    }
    if batch_mean.iter().any(|v| !v.is_finite()) {
        return Err(ProtoError::NonFinite(proto.class_id));
    }
    Ok(proto.count + batch_count)
}

/// Folds a batch mean into a prototype with the shift-by-difference form
/// `mu + (n / k) * (z - mu)`.
pub fn welford_update(proto: &Prototype, batch_mean: &[f32], batch_count: u64) -> Result<Prototype> {
    let total = check_update(proto, batch_mean, batch_count)?;
    let weight = batch_count as f64 / total as f64;
    let mean = proto
        .mean
        .iter()
        .zip(batch_mean)
        .map(|(&mu, &z)| {
            let mu = f64::from(mu);
            (mu + weight * (f64::from(z) - mu)) as f32
        })
        .collect();
    Prototype::new(proto.class_id, mean, total)
}

/// Folds a batch mean into a prototype by re-weighting both terms:
/// `(k_old * mu) / k + (n * z) / k`. Kept alongside [`welford_update`] to
/// compare their rounding behaviour.
pub fn naive_update(proto: &Prototype, batch_mean: &[f32], batch_count: u64) -> Result<Prototype> {
    let total = check_update(proto, batch_mean, batch_count)?;
    let k_old = proto.count as f64;
    let k_new = total as f64;
    let n = batch_count as f64;
    let mean = proto
        .mean
        .iter()
        .zip(batch_mean)
        .map(|(&mu, &z)| (k_old * f64::from(mu) / k_new + n * f64::from(z) / k_new) as f32)
        .collect();
    Prototype::new(proto.class_id, mean, total)
}

impl PrototypeStore {
    /// Applies an update list in place. The whole list is validated before
    /// any prototype changes, so a rejected list leaves the store untouched.
    pub fn merge(&mut self, updates: &[ClassUpdate]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for u in updates {
            self.check_dim(u.centroid.len())?;
            if u.count == 0 {
                return Err(ProtoError::ZeroCount);
            }
            if u.centroid.iter().any(|v| !v.is_finite()) {
                return Err(ProtoError::NonFinite(u.class_id));
            }
            if !seen.insert(u.class_id) {
                return Err(ProtoError::DuplicateClass(u.class_id));
            }
        }
        for u in updates {
            let merged = match self.get(u.class_id) {
                Some(existing) => welford_update(existing, &u.centroid, u.count)?,
                None => Prototype::new(u.class_id, u.centroid.clone(), u.count)?,
            };
            self.insert(merged);
        }
        Ok(())
    }
}

/// Returns `server` with `updates` merged in: existing classes are folded
/// with [`welford_update`], novel classes are inserted as-is.
pub fn merge_store(server: &PrototypeStore, updates: &[ClassUpdate]) -> Result<PrototypeStore> {
    let mut out = server.clone();
    out.merge(updates)?;
    Ok(out)
}
