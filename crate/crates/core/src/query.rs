//! Batch selection from the unlabeled pool.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ProbVector;
use crate::corpus::SampleId;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("asked for {requested} samples but only {available} are scored")]
    Bounds { requested: usize, available: usize },
    #[error("margin needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    Random,
    LeastConfidence,
    BreakingTies,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 3] = [
        QueryStrategy::Random,
        QueryStrategy::LeastConfidence,
        QueryStrategy::BreakingTies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryStrategy::Random => "random",
            QueryStrategy::LeastConfidence => "least_confidence",
            QueryStrategy::BreakingTies => "breaking_ties",
        }
    }

    /// Short label used in Table-V-style reports.
    pub fn abbreviation(self) -> &'static str {
        match self {
            QueryStrategy::Random => "R",
            QueryStrategy::LeastConfidence => "LC",
            QueryStrategy::BreakingTies => "BT",
        }
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QueryStrategy::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| {
                format!("unknown query strategy {s:?}; valid: random, least_confidence, breaking_ties")
            })
    }
}

/// Gap between the two largest probabilities.
pub fn margin(p: &ProbVector) -> Result<f64, QueryError> {
    let probs = p.probabilities();
    if probs.len() < 2 {
        return Err(QueryError::TooFewClasses(probs.len()));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in probs {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok((first - second).clamp(0.0, 1.0))
}

/// Uncertainty score, higher means query sooner.
fn least_confidence_score(p: &ProbVector) -> f64 {
    1.0 - p.max()
}

/// Picks `k` ids, returned in selection-priority order.
///
/// Score ties are broken by ascending id, so the result does not depend on the
/// order of `scored`.
pub fn query_batch(
    strategy: QueryStrategy,
    scored: &[(SampleId, ProbVector)],
    k: usize,
    seed: u64,
) -> Result<Vec<SampleId>, QueryError> {
    if k > scored.len() {
        return Err(QueryError::Bounds {
            requested: k,
            available: scored.len(),
        });
    }
    match strategy {
        QueryStrategy::Random => {
            let mut ids: Vec<SampleId> = scored.iter().map(|(id, _)| *id).collect();
            ids.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (picked, _) = ids.partial_shuffle(&mut rng, k);
            Ok(picked.to_vec())
        }
        QueryStrategy::LeastConfidence => {
            let mut keyed: Vec<(f64, SampleId)> = scored
                .iter()
                .map(|(id, p)| (least_confidence_score(p), *id))
                .collect();
            // largest uncertainty first
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(keyed.into_iter().take(k).map(|(_, id)| id).collect())
        }
        QueryStrategy::BreakingTies => {
            let mut keyed = scored
                .iter()
                .map(|(id, p)| margin(p).map(|m| (m, *id)))
                .collect::<Result<Vec<_>, _>>()?;
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(keyed.into_iter().take(k).map(|(_, id)| id).collect())
        }
    }
}

/// Orders `(score, id)` ascending with ids breaking ties.
pub fn cmp_score_then_id(a: &(f64, SampleId), b: &(f64, SampleId)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn lc_example() -> Vec<(SampleId, ProbVector)> {
        vec![(0, pv(&[0.9, 0.1])), (1, pv(&[0.6, 0.4])), (2, pv(&[0.5, 0.5]))]
    }

    #[test]
    fn least_confidence_top1() {
        assert_eq!(query_batch(QueryStrategy::LeastConfidence, &lc_example(), 1, 0).unwrap(), vec![2]);
    }

    #[test]
    fn least_confidence_full_order() {
        assert_eq!(
            query_batch(QueryStrategy::LeastConfidence, &lc_example(), 3, 0).unwrap(),
            vec![2, 1, 0]
        );
    }

    #[test]
    fn breaking_ties_top1() {
        let scored = vec![(0, pv(&[0.5, 0.3, 0.2])), (1, pv(&[0.4, 0.39, 0.21]))];
        assert_eq!(query_batch(QueryStrategy::BreakingTies, &scored, 1, 0).unwrap(), vec![1]);
    }

    #[test]
    fn margin_edges() {
        assert_eq!(margin(&pv(&[0.5, 0.5])).unwrap(), 0.0);
        assert_eq!(margin(&pv(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(margin(&pv(&[1.0])), Err(QueryError::TooFewClasses(1)));
    }

    #[test]
    fn oversized_request() {
        assert_eq!(
            query_batch(QueryStrategy::Random, &lc_example(), 4, 0),
            Err(QueryError::Bounds { requested: 4, available: 3 })
        );
    }

    #[test]
    fn uniform_scores_fall_back_to_id_order() {
        let scored: Vec<_> = [5usize, 3, 9, 1].iter().map(|&id| (id, ProbVector::uniform(3))).collect();
        for s in [QueryStrategy::LeastConfidence, QueryStrategy::BreakingTies] {
            assert_eq!(query_batch(s, &scored, 3, 0).unwrap(), vec![1, 3, 5]);
        }
    }

    #[test]
    fn random_is_seeded() {
        let scored: Vec<_> = (0..50).map(|id| (id, ProbVector::uniform(2))).collect();
        let a = query_batch(QueryStrategy::Random, &scored, 10, 42).unwrap();
        let b = query_batch(QueryStrategy::Random, &scored, 10, 42).unwrap();
        let c = query_batch(QueryStrategy::Random, &scored, 10, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 10);
    }

    #[test]
    fn parse_names() {
        assert_eq!("breaking_ties".parse::<QueryStrategy>(), Ok(QueryStrategy::BreakingTies));
        let err = "entropy".parse::<QueryStrategy>().unwrap_err();
        assert!(err.contains("least_confidence"));
    }

    fn prob_vec(c: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f64..1.0, c).prop_map(|raw| {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            ProbVector::from_scores(&raw.iter().map(|r| (r / s).ln_1p()).collect::<Vec<_>>())
        })
    }

    fn scored_set() -> impl Strategy<Value = Vec<(SampleId, ProbVector)>> {
        (2usize..5).prop_flat_map(|c| {
            prop::collection::vec(prob_vec(c), 1..60)
                .prop_map(|v| v.into_iter().enumerate().collect::<Vec<_>>())
        })
    }

    proptest! {
        #[test]
        fn margin_matches_sort_oracle(p in (2usize..6).prop_flat_map(prob_vec)) {
            let mut sorted = p.probabilities().to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assert!((margin(&p).unwrap() - (sorted[0] - sorted[1])).abs() < 1e-15);
        }

        #[test]
        fn breaking_ties_is_argmin_of_margins(scored in scored_set(), k_frac in 0.0f64..=1.0) {
            let k = (scored.len() as f64 * k_frac) as usize;
            let got = query_batch(QueryStrategy::BreakingTies, &scored, k, 0).unwrap();
            // brute force: repeatedly take the minimum remaining margin
            let mut remaining: Vec<(f64, SampleId)> = scored.iter().map(|(id, p)| {
                let mut s = p.probabilities().to_vec();
                s.sort_by(|a, b| b.total_cmp(a));
                (s[0] - s[1], *id)
            }).collect();
            let mut expected = Vec::new();
            for _ in 0..k {
                let (pos, _) = remaining.iter().enumerate()
                    .min_by(|a, b| cmp_score_then_id(a.1, b.1)).unwrap();
                expected.push(remaining.remove(pos).1);
            }
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn selection_is_permutation_invariant(scored in scored_set(), seed: u64, k_frac in 0.0f64..=1.0) {
            let k = (scored.len() as f64 * k_frac) as usize;
            let mut shuffled = scored.clone();
            shuffled.reverse();
            shuffled.rotate_left(scored.len() / 3);
            for s in QueryStrategy::ALL {
                let mut a = query_batch(s, &scored, k, seed).unwrap();
                let mut b = query_batch(s, &shuffled, k, seed).unwrap();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn confident_sample_leaves_lc_top1(scored in scored_set()) {
            prop_assume!(scored.len() >= 2);
            let top = query_batch(QueryStrategy::LeastConfidence, &scored, 1, 0).unwrap()[0];
            let best_other = scored.iter().filter(|(id, _)| *id != top)
                .map(|(_, p)| p.max()).fold(0.0, f64::max);
            prop_assume!(best_other < 0.999);
            let c = scored[0].1.len();
            let mut boosted = vec![(1.0 - (best_other + 1.0) / 2.0) / (c - 1) as f64; c];
            boosted[0] = (best_other + 1.0) / 2.0;
            let mut changed = scored.clone();
            changed[top].1 = ProbVector::new(boosted).unwrap();
            let new_top = query_batch(QueryStrategy::LeastConfidence, &changed, 1, 0).unwrap()[0];
            prop_assert_ne!(new_top, top);
        }
    }
}
