//! Consistency voting across sampled completions.

use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingRule {
    /// Any disagreement or parse failure makes the sample inconsistent.
    #[default]
    Unanimous,
    /// Accept a label backed by a strict majority of the n completions.
    Majority,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent(ClassId),
    /// `observed[j]` is completion j's label, `None` where it failed to parse.
    Inconsistent { observed: Vec<Option<ClassId>> },
}

impl Verdict {
    pub fn is_consistent(&self) -> bool {
        matches!(self, Verdict::Consistent(_))
    }

    pub fn label(&self) -> Option<ClassId> {
        match self {
            Verdict::Consistent(l) => Some(*l),
            Verdict::Inconsistent { .. } => None,
        }
    }
}

/// Votes over one sample's labels from each completion.
pub fn vote(observed: &[Option<ClassId>], rule: VotingRule) -> Verdict {
    let inconsistent = || Verdict::Inconsistent {
        observed: observed.to_vec(),
    };
    let Some(&Some(first)) = observed.first() else {
        if rule == VotingRule::Unanimous || observed.is_empty() {
            return inconsistent();
        }
        return majority(observed).unwrap_or_else(inconsistent);
    };
    match rule {
        VotingRule::Unanimous => {
            if observed.iter().all(|o| *o == Some(first)) {
                Verdict::Consistent(first)
            } else {
                inconsistent()
            }
        }
        VotingRule::Majority => majority(observed).unwrap_or_else(inconsistent),
    }
}

fn majority(observed: &[Option<ClassId>]) -> Option<Verdict> {
    let mut counts: Vec<(ClassId, usize)> = Vec::new();
    for label in observed.iter().flatten() {
        match counts.iter_mut().find(|(l, _)| l == label) {
            Some((_, n)) => *n += 1,
            None => counts.push((*label, 1)),
        }
    }
    counts
        .into_iter()
        .find(|&(_, n)| 2 * n > observed.len())
        .map(|(l, _)| Verdict::Consistent(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const POS: ClassId = 1;
    const NEG: ClassId = 0;

    #[test]
    fn unanimity() {
        assert_eq!(vote(&[Some(POS); 3], VotingRule::Unanimous), Verdict::Consistent(POS));
        assert_eq!(
            vote(&[Some(POS), Some(NEG), Some(POS)], VotingRule::Unanimous),
            Verdict::Inconsistent { observed: vec![Some(POS), Some(NEG), Some(POS)] }
        );
        assert_eq!(vote(&[Some(POS)], VotingRule::Unanimous), Verdict::Consistent(POS));
    }

    #[test]
    fn parse_failure_is_inconsistent() {
        assert!(!vote(&[Some(POS), None, Some(POS)], VotingRule::Unanimous).is_consistent());
        assert!(!vote(&[None], VotingRule::Unanimous).is_consistent());
        assert!(!vote(&[], VotingRule::Unanimous).is_consistent());
    }

    #[test]
    fn majority_rule() {
        assert_eq!(vote(&[Some(POS), Some(NEG), Some(POS)], VotingRule::Majority), Verdict::Consistent(POS));
        assert_eq!(vote(&[None, Some(NEG), Some(NEG)], VotingRule::Majority), Verdict::Consistent(NEG));
        assert!(!vote(&[Some(POS), Some(NEG)], VotingRule::Majority).is_consistent());
    }

    proptest! {
        #[test]
        fn one_deviation_breaks_unanimity(n in 2usize..8, label in 0usize..4, dev in 0usize..4, at in 0usize..8) {
            prop_assume!(dev != label);
            let mut obs = vec![Some(label); n];
            obs[at % n] = Some(dev);
            prop_assert!(!vote(&obs, VotingRule::Unanimous).is_consistent());
        }
    }
}
