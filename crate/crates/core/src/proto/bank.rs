use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{ClassId, Embedding, ProtoError, Prototype, PrototypeStore, Result};

/// Every embedding seen per class, in insertion order. Prototypes are
/// computed from the bank on demand instead of being folded online.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    entries: BTreeMap<ClassId, Vec<Embedding>>,
}

impl EmbeddingBank {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ProtoError::ZeroDimension);
        }
        Ok(EmbeddingBank {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, class_id: ClassId, embedding: Embedding) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(ProtoError::DimensionMismatch {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite(class_id));
        }
        self.entries.entry(class_id).or_default().push(embedding);
        Ok(())
    }

    /// Appends every embedding of `other`, class by class.
    pub fn extend_from(&mut self, other: &EmbeddingBank) -> Result<()> {
        if other.dim != self.dim {
            return Err(ProtoError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        for (id, list) in &other.entries {
            self.entries.entry(*id).or_default().extend(list.iter().cloned());
        }
        Ok(())
    }

    pub fn class_embeddings(&self, class_id: ClassId) -> Option<&[Embedding]> {
        self.entries.get(&class_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[Embedding])> {
        self.entries.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_embeddings(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

fn lexicographic(a: &Embedding, b: &Embedding) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Exact per-class centroids of a bank.
///
/// Each class is summed in a canonical (sorted) order, so the result is
/// bit-identical however the embeddings were inserted.
pub fn bank_prototypes(bank: &EmbeddingBank) -> Result<PrototypeStore> {
    let mut store = PrototypeStore::new(bank.dim)?;
    for (&id, list) in &bank.entries {
        if list.is_empty() {
            return Err(ProtoError::EmptySupport);
        }
        let mut ordered: Vec<&Embedding> = list.iter().collect();
        ordered.sort_by(|a, b| lexicographic(a, b));
        let mean = super::batch_centroid(&ordered)?;
        let mean = mean.into_iter().map(|v| v as f32).collect();
        store.insert(Prototype::new(id, mean, list.len() as u64)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::{welford_update, ClassUpdate};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_embedding_class() {
        let mut bank = EmbeddingBank::new(2).unwrap();
        bank.push(4, vec![3.0, 3.0]).unwrap();
        let store = bank_prototypes(&bank).unwrap();
        let p = store.get(4).unwrap();
        assert_eq!(p.mean(), &[3.0, 3.0]);
        assert_eq!(p.count(), 1);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let mut bank = EmbeddingBank::new(2).unwrap();
        assert!(bank.push(0, vec![1.0]).is_err());
    }

    #[test]
    fn empty_class_list_is_an_error() {
        let mut bank = EmbeddingBank::new(1).unwrap();
        bank.entries.insert(3, Vec::new());
        assert_eq!(bank_prototypes(&bank), Err(ProtoError::EmptySupport));
    }

    #[test]
    fn bank_matches_sequential_folds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dim = 12;
        let mut bank = EmbeddingBank::new(dim).unwrap();
        let mut store = PrototypeStore::new(dim).unwrap();
        for _ in 0..40 {
            let class = rng.random_range(0..4u32);
            let size = rng.random_range(1..60usize);
            let batch: Vec<Vec<f32>> = (0..size)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let centroid: Vec<f32> = crate::proto::batch_centroid(&batch)
                .unwrap()
                .iter()
                .map(|v| *v as f32)
                .collect();
            store
                .merge(&[ClassUpdate::new(class, centroid, size as u64).unwrap()])
                .unwrap();
            for e in batch {
                bank.push(class, e).unwrap();
            }
        }
        let exact = bank_prototypes(&bank).unwrap();
        assert!(exact.max_abs_diff(&store).unwrap() <= 1e-6);
    }

    #[test]
    fn single_example_folds_match_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 8;
        let data: Vec<Vec<f32>> = (0..2000)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let mut bank = EmbeddingBank::new(dim).unwrap();
        let mut proto = Prototype::new(0, data[0].clone(), 1).unwrap();
        bank.push(0, data[0].clone()).unwrap();
        for e in &data[1..] {
            proto = welford_update(&proto, e, 1).unwrap();
            bank.push(0, e.clone()).unwrap();
        }
        let exact = bank_prototypes(&bank).unwrap();
        let online = PrototypeStore::from_prototypes(dim, [proto]).unwrap();
        assert!(exact.max_abs_diff(&online).unwrap() <= 1e-6);
    }

    #[test]
    fn insertion_order_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 5;
        let mut items: Vec<(ClassId, Vec<f32>)> = (0..300)
            .map(|_| {
                let c = rng.random_range(0..3u32);
                (c, (0..dim).map(|_| rng.random_range(-10.0f32..10.0)).collect())
            })
            .collect();
        let build = |items: &[(ClassId, Vec<f32>)]| {
            let mut bank = EmbeddingBank::new(dim).unwrap();
            for (c, e) in items {
                bank.push(*c, e.clone()).unwrap();
            }
            bank_prototypes(&bank).unwrap()
        };
        let reference = build(&items);
        for _ in 0..5 {
            items.shuffle(&mut rng);
            let again = build(&items);
            for (a, b) in reference.iter().zip(again.iter()) {
                let bits_a: Vec<u32> = a.mean().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.mean().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
                assert_eq!(a.count(), b.count());
            }
        }
    }
}
