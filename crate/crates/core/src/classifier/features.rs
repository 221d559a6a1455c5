//! Hashed unigram+bigram features.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DIMENSION: usize = 1 << 18;

/// Sparse, L2-normalized term-frequency vector sorted by index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Builds a normalized vector from raw (index, weight) pairs.
    pub fn from_counts(mut raw: Vec<(u32, f64)>) -> Self {
        raw.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (idx, w) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == idx => last.1 += w,
                _ => entries.push((idx, w)),
            }
        }
        entries.retain(|&(_, w)| w != 0.0);
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut entries {
                e.1 /= norm;
            }
        }
        Self { entries }
    }
}

/// Cosine similarity; zero when either side is empty.
pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Lowercased word tokens: maximal runs of alphanumerics, keeping inner apostrophes.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    lowered
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// 64-bit FNV-1a of the bytes; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn bucket(key: &str, dimension: usize) -> u32 {
    (stable_hash(key.as_bytes()) % dimension as u64) as u32
}

/// Maps text to hashed term frequencies over unigrams and bigrams.
///
/// Bigrams are formed after collapsing immediate repeats, so "good good" and
/// "good" share one feature.
pub fn featurize(text: &str, dimension: usize) -> FeatureVector {
    assert!(
        dimension > 0 && dimension <= u32::MAX as usize,
        "feature dimension out of range"
    );
    let tokens = tokenize(text);
    let mut raw: Vec<(u32, f64)> = tokens.iter().map(|t| (bucket(t, dimension), 1.0)).collect();
    let mut collapsed = tokens.clone();
    collapsed.dedup();
    for pair in collapsed.windows(2) {
        let key = format!("{} {}", pair[0], pair[1]);
        raw.push((bucket(&key, dimension), 1.0));
    }
    FeatureVector::from_counts(raw)
}
