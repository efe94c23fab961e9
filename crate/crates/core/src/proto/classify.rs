use std::collections::BTreeMap;

use super::{ClassId, ProtoError, PrototypeStore, Result};

fn check_query(query: &[f32], store: &PrototypeStore) -> Result<()> {
    if store.is_empty() {
        return Err(ProtoError::EmptyStore);
    }
    store.check_dim(query.len())
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Squared Euclidean distance from `query` to every prototype mean.
pub fn sq_distances(query: &[f32], store: &PrototypeStore) -> Result<BTreeMap<ClassId, f64>> {
    check_query(query, store)?;
    Ok(store.iter().map(|p| (p.class_id(), sq_dist(query, p.mean()))).collect())
}

/// Softmax over negated squared distances.
pub fn classify_probs(query: &[f32], store: &PrototypeStore) -> Result<BTreeMap<ClassId, f64>> {
    let dists = sq_distances(query, store)?;
    let min = dists.values().copied().fold(f64::INFINITY, f64::min);
    // logits are -d; shifting by the max logit keeps every exponent <= 0
    let weights: BTreeMap<ClassId, f64> = dists.iter().map(|(id, d)| (*id, (min - d).exp())).collect();
    let total: f64 = weights.values().sum();
    Ok(weights.into_iter().map(|(id, w)| (id, w / total)).collect())
}

/// Class whose prototype is nearest to `query`; ties go to the smallest id.
pub fn predict(query: &[f32], store: &PrototypeStore) -> Result<ClassId> {
    check_query(query, store)?;
    let mut best: Option<(ClassId, f64)> = None;
    for p in store.iter() {
        let d = sq_dist(query, p.mean());
        // strict comparison: iteration is in ascending id order
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((p.class_id(), d));
        }
    }
    Ok(best.map(|(id, _)| id).expect("store is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::Prototype;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(protos: &[(ClassId, &[f32])]) -> PrototypeStore {
        let dim = protos[0].1.len();
        PrototypeStore::from_prototypes(
            dim,
            protos.iter().map(|(id, m)| Prototype::new(*id, m.to_vec(), 1).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn distance_to_self_is_zero() {
        let s = store(&[(1, &[1.0, 2.0]), (2, &[0.0, 0.0])]);
        assert_eq!(sq_distances(&[1.0, 2.0], &s).unwrap()[&1], 0.0);
    }

    #[test]
    fn three_four_five() {
        let s = store(&[(0, &[3.0, 4.0])]);
        assert_eq!(sq_distances(&[0.0, 0.0], &s).unwrap()[&0], 25.0);
    }

    #[test]
    fn distances_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let protos: Vec<Prototype> = (0..6)
            .map(|id| Prototype::new(id, (0..16).map(|_| rng.random_range(-2.0f32..2.0)).collect(), 1).unwrap())
            .collect();
        let s = PrototypeStore::from_prototypes(16, protos.clone()).unwrap();
        let q: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let got = sq_distances(&q, &s).unwrap();
        for p in &protos {
            let acc: f64 = q
                .iter()
                .zip(p.mean())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            assert!((got[&p.class_id()] - acc).abs() <= 1e-9);
        }
    }

    #[test]
    fn empty_store_errors() {
        let s = PrototypeStore::new(2).unwrap();
        assert_eq!(sq_distances(&[0.0, 0.0], &s), Err(ProtoError::EmptyStore));
        assert_eq!(classify_probs(&[0.0, 0.0], &s), Err(ProtoError::EmptyStore));
        assert_eq!(predict(&[0.0, 0.0], &s), Err(ProtoError::EmptyStore));
        assert_eq!(ProtoError::EmptyStore.to_string(), "no known classes");
    }

    #[test]
    fn query_dimension_checked() {
        let s = store(&[(0, &[0.0, 0.0])]);
        assert!(matches!(predict(&[0.0], &s), Err(ProtoError::DimensionMismatch { .. })));
    }

    #[test]
    fn equidistant_pair_is_half_half() {
        let s = store(&[(0, &[-1.0, 0.0]), (1, &[1.0, 0.0])]);
        let p = classify_probs(&[0.0, 3.0], &s).unwrap();
        assert_eq!(p[&0], 0.5);
        assert_eq!(p[&1], 0.5);
    }

    #[test]
    fn single_class_has_probability_one() {
        let s = store(&[(9, &[4.0])]);
        assert_eq!(classify_probs(&[100.0], &s).unwrap()[&9], 1.0);
    }

    #[test]
    fn far_queries_do_not_overflow() {
        let s = store(&[(0, &[0.0]), (1, &[1.0])]);
        let p = classify_probs(&[1.0e6], &s).unwrap();
        assert!(p.values().all(|v| v.is_finite()));
        assert_eq!(p[&1], 1.0);
    }

    #[test]
    fn predict_at_prototype() {
        let s = store(&[(3, &[0.0, 1.0]), (5, &[2.0, 2.0])]);
        assert_eq!(predict(&[2.0, 2.0], &s).unwrap(), 5);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let s = store(&[(9, &[1.0]), (3, &[-1.0])]);
        assert_eq!(predict(&[0.0], &s).unwrap(), 3);
    }

    #[test]
    fn predict_agrees_with_argmax_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        let protos: Vec<Prototype> = (0..7)
            .map(|id| Prototype::new(id * 3, (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect(), 1).unwrap())
            .collect();
        let s = PrototypeStore::from_prototypes(4, protos).unwrap();
        for _ in 0..1000 {
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let probs = classify_probs(&q, &s).unwrap();
            let best = probs.values().copied().fold(f64::MIN, f64::max);
            let argmax = probs.iter().find(|(_, p)| **p == best).map(|(id, _)| *id).unwrap();
            assert_eq!(predict(&q, &s).unwrap(), argmax);
        }
    }
}
