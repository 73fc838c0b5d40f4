//! Ranking metrics for single-target next-item evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{rankings} rankings for {targets} targets")]
    LengthMismatch { rankings: usize, targets: usize },
}

/// 1-based position of `target` in `ranking`.
pub fn rank_of<T: PartialEq>(ranking: &[T], target: &T) -> Option<usize> {
    ranking.iter().position(|x| x == target).map(|p| p + 1)
}

fn ranks<T: PartialEq>(rankings: &[Vec<T>], targets: &[T]) -> Result<Vec<Option<usize>>, EvalError> {
    if rankings.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            rankings: rankings.len(),
            targets: targets.len(),
        });
    }
    Ok(rankings.iter().zip(targets).map(|(r, t)| rank_of(r, t)).collect())
}

/// Mean over users of a per-rank gain. Users are grouped by rank first, so
/// the result does not depend on user order.
fn mean_gain(ranks: &[Option<usize>], k: usize, gain: impl Fn(usize) -> f64) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in ranks.iter().flatten().filter(|&&r| r <= k) {
        *counts.entry(*r).or_default() += 1;
    }
    let total: f64 = counts.iter().map(|(&r, &c)| c as f64 * gain(r)).sum();
    total / ranks.len() as f64
}

pub fn recall_at_k<T: PartialEq>(rankings: &[Vec<T>], targets: &[T], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let r = ranks(rankings, targets)?;
    Ok(mean_gain(&r, k, |_| 1.0))
}

/// Single-relevant NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k<T: PartialEq>(rankings: &[Vec<T>], targets: &[T], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let r = ranks(rankings, targets)?;
    Ok(mean_gain(&r, k, |r| 1.0 / ((r + 1) as f64).log2()))
}

pub fn miss_rate_at_k<T: PartialEq>(rankings: &[Vec<T>], targets: &[T], k: usize) -> Result<f64, EvalError> {
    Ok(1.0 - recall_at_k(rankings, targets, k)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHit {
    pub user_id: String,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    pub mr: BTreeMap<String, f64>,
    pub n_users: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hits: Vec<UserHit>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k.to_string()).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k.to_string()).copied()
    }
}

pub fn evaluate<T: PartialEq>(
    user_ids: &[String],
    rankings: &[Vec<T>],
    targets: &[T],
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    let r = ranks(rankings, targets)?;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let mut mr = BTreeMap::new();
    for &k in ks {
        if k == 0 {
            return Err(EvalError::ZeroK);
        }
        let rc = mean_gain(&r, k, |_| 1.0);
        recall.insert(k.to_string(), rc);
        ndcg.insert(k.to_string(), mean_gain(&r, k, |x| 1.0 / ((x + 1) as f64).log2()));
        mr.insert(k.to_string(), 1.0 - rc);
    }
    let hits = user_ids
        .iter()
        .zip(&r)
        .map(|(u, &rank)| UserHit {
            user_id: u.clone(),
            rank,
        })
        .collect();
    Ok(EvalReport {
        recall,
        ndcg,
        mr,
        n_users: targets.len(),
        hits,
    })
}

/// `recall_a@k - recall_b@k`.
pub fn delta_recall(a: &EvalReport, b: &EvalReport, k: usize) -> Option<f64> {
    Some(a.recall_at(k)? - b.recall_at(k)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn closed_forms() {
        let r = vec![vec![1, 2, 3, 4, 5]];
        assert_eq!(recall_at_k(&r, &[1], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &[9], 5).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&r, &[1], 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&r, &[3], 5).unwrap(), 0.5);
        let long: Vec<Vec<usize>> = vec![(1..=20).collect()];
        assert_eq!(ndcg_at_k(&long, &[11], 10).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &[1], 0), Err(EvalError::ZeroK));
    }

    fn report(r5: f64) -> EvalReport {
        EvalReport {
            recall: [("5".to_string(), r5)].into(),
            ndcg: BTreeMap::new(),
            mr: BTreeMap::new(),
            n_users: 1,
            hits: vec![],
        }
    }

    #[test]
    fn delta() {
        let (a, b) = (report(0.3), report(0.25));
        assert_eq!(delta_recall(&a, &a, 5), Some(0.0));
        assert!((delta_recall(&a, &b, 5).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(delta_recall(&a, &b, 5).unwrap(), -delta_recall(&b, &a, 5).unwrap());
    }

    #[test]
    fn report_json_shape() {
        let rep = evaluate(&["u".into()], &[vec!["a", "b"]], &["b"], &[5, 10]).unwrap();
        let v = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["recall"]["5"], 1.0);
        assert_eq!(v["n_users"], 1);
        assert_eq!(v["mr"]["10"], 0.0);
    }

    #[test]
    fn random_rankings_match_counting() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rankings = vec![];
        let mut targets = vec![];
        for _ in 0..200 {
            let mut items: Vec<u32> = (0..30).collect();
            items.shuffle(&mut rng);
            rankings.push(items[..15].to_vec());
            targets.push(items[rand::Rng::random_range(&mut rng, 0..30)]);
        }
        for k in [1, 5, 10, 15] {
            let count = rankings
                .iter()
                .zip(&targets)
                .filter(|(r, t)| r.iter().take(k).any(|x| x == *t))
                .count();
            assert_eq!(recall_at_k(&rankings, &targets, k).unwrap(), count as f64 / 200.0);
        }
    }

    proptest! {
        #[test]
        fn invariants(
            ranks in proptest::collection::vec(proptest::option::of(1usize..30), 1..80),
            k in 1usize..25,
            seed in 0u64..1000,
        ) {
            let rankings: Vec<Vec<usize>> = ranks.iter().map(|_| (1..30).collect()).collect();
            let targets: Vec<usize> = ranks.iter().map(|r| r.unwrap_or(999)).collect();
            let rc = recall_at_k(&rankings, &targets, k).unwrap();
            let nd = ndcg_at_k(&rankings, &targets, k).unwrap();
            prop_assert_eq!(miss_rate_at_k(&rankings, &targets, k).unwrap() + rc, 1.0);
            prop_assert!(nd <= rc + 1e-12);
            prop_assert!(nd >= rc / ((k + 1) as f64).log2() - 1e-12);
            prop_assert!(recall_at_k(&rankings, &targets, k + 1).unwrap() >= rc);

            let mut perm: Vec<usize> = (0..ranks.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let r2: Vec<Vec<usize>> = perm.iter().map(|&i| rankings[i].clone()).collect();
            let t2: Vec<usize> = perm.iter().map(|&i| targets[i]).collect();
            prop_assert_eq!(recall_at_k(&r2, &t2, k).unwrap(), rc);
            prop_assert_eq!(ndcg_at_k(&r2, &t2, k).unwrap(), nd);
        }
    }
}
