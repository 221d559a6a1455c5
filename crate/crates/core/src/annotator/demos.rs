//! Choosing in-context demonstrations from a labeled pool.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{estimate_tokens, AnnotatorError};
use crate::classifier::{cosine, featurize, DEFAULT_DIMENSION};
use crate::corpus::{ClassId, SampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoStrategy {
    Random,
    MinToken,
    MaxSimilarity,
}

impl DemoStrategy {
    pub const ALL: [DemoStrategy; 3] = [
        DemoStrategy::Random,
        DemoStrategy::MinToken,
        DemoStrategy::MaxSimilarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DemoStrategy::Random => "random",
            DemoStrategy::MinToken => "min_token",
            DemoStrategy::MaxSimilarity => "max_similarity",
        }
    }
}

impl fmt::Display for DemoStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DemoStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DemoStrategy::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                format!("unknown demo strategy {s:?}; valid: random, min_token, max_similarity")
            })
    }
}

/// A labeled example eligible for the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub id: SampleId,
    pub text: String,
    pub label: ClassId,
}

/// Picks `per_class` demos for every class, grouped in class order.
///
/// `target` is required for [`DemoStrategy::MaxSimilarity`]. Ties under
/// min_token and max_similarity go to the lower id.
pub fn select_demos(
    pool: &[Demo],
    class_names: &[String],
    strategy: DemoStrategy,
    per_class: usize,
    target: Option<&str>,
    seed: u64,
) -> Result<Vec<Demo>, AnnotatorError> {
    let target_features = match (strategy, target) {
        (DemoStrategy::MaxSimilarity, Some(t)) => Some(featurize(t, DEFAULT_DIMENSION)),
        (DemoStrategy::MaxSimilarity, None) => {
            return Err(AnnotatorError::Argument(
                "max_similarity needs a target text".into(),
            ))
        }
        _ => None,
    };
    if per_class == 0 {
        return Ok(Vec::new());
    }

    let mut by_class: Vec<Vec<&Demo>> = vec![Vec::new(); class_names.len()];
    for d in pool {
        if d.label >= class_names.len() {
            return Err(AnnotatorError::Argument(format!(
                "demo {} has label index {} outside {} classes",
                d.id,
                d.label,
                class_names.len()
            )));
        }
        by_class[d.label].push(d);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(AnnotatorError::InsufficientDemos {
                class: class_names[c].clone(),
                needed: per_class,
                available: members.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * class_names.len());
    for mut members in by_class {
        members.sort_by_key(|d| d.id);
        match strategy {
            DemoStrategy::Random => {
                let (picked, _) = members.partial_shuffle(&mut rng, per_class);
                out.extend(picked.iter().map(|d| (*d).clone()));
            }
            DemoStrategy::MinToken => {
                members.sort_by_key(|d| (estimate_tokens(&d.text), d.id));
                out.extend(members[..per_class].iter().map(|d| (*d).clone()));
            }
            DemoStrategy::MaxSimilarity => {
                let target = target_features.as_ref().expect("checked above");
                let mut scored: Vec<(f64, &Demo)> = members
                    .iter()
                    .map(|d| (cosine(&featurize(&d.text, DEFAULT_DIMENSION), target), *d))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
                out.extend(scored[..per_class].iter().map(|(_, d)| (*d).clone()));
            }
        }
    }
    Ok(out)
}
