//! Deterministic synthetic corpora for offline experiments and tests.

use std::collections::HashSet;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;

pub const REVIEW_CLASSES: [&str; 2] = ["Negative", "Positive"];

const POSITIVE: &[&str] = &[
    "wonderful", "moving", "funny", "brilliant", "charming", "gripping", "heartfelt",
    "delightful", "sharp", "gorgeous", "clever", "tender", "thrilling", "beautiful",
    "witty", "stunning", "absorbing", "inventive", "warm", "superb", "lively", "touching",
    "memorable", "rewarding", "graceful", "confident", "radiant", "playful",
];
const NEGATIVE: &[&str] = &[
    "dull", "tedious", "clumsy", "lifeless", "bland", "shallow", "predictable", "boring",
    "messy", "forgettable", "grating", "sluggish", "hollow", "tiresome", "wooden", "stale",
    "murky", "flat", "pointless", "awkward", "overlong", "lazy", "muddled", "joyless",
    "limp", "cheap", "irritating", "derivative",
];
const ASPECTS: &[&str] = &[
    "plot", "acting", "script", "score", "cinematography", "dialogue", "pacing", "ending",
    "cast", "direction", "lead performance", "editing", "story", "humor", "visuals",
    "soundtrack", "premise", "final act", "screenplay", "supporting cast",
];
const SUBJECTS: &[&str] = &[
    "this film", "the movie", "this drama", "the comedy", "this thriller", "the sequel",
    "this romance", "the documentary", "this picture", "the remake", "this debut",
    "the adaptation", "this western", "the musical", "this caper",
];
const INTENSIFIERS: &[&str] = &["", "", "", "very ", "truly ", "oddly ", "quite ", "often ", "utterly "];
const POSITIVE_FRAMES: &[&str] = &[
    "a {adj} ride from start to finish",
    "worth every minute",
    "easily one of the year's best",
    "i left the theater smiling",
    "it earns its emotions",
    "a {adj} piece of work",
];
const NEGATIVE_FRAMES: &[&str] = &[
    "a {adj} slog from start to finish",
    "not worth the ticket",
    "easily one of the year's worst",
    "i checked my watch twice",
    "it never earns its emotions",
    "a {adj} piece of work",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn review_sentence(rng: &mut ChaCha8Rng, positive: bool) -> String {
    let (own, other) = if positive { (POSITIVE, NEGATIVE) } else { (NEGATIVE, POSITIVE) };
    let frames = if positive { POSITIVE_FRAMES } else { NEGATIVE_FRAMES };
    match rng.random_range(0..5) {
        0 => format!(
            "{} is {}{} and {}",
            pick(rng, SUBJECTS),
            pick(rng, INTENSIFIERS),
            pick(rng, own),
            pick(rng, own)
        ),
        1 => format!(
            "the {} is {}{}",
            pick(rng, ASPECTS),
            pick(rng, INTENSIFIERS),
            pick(rng, own)
        ),
        // concession: the other polarity first, the verdict last
        2 => format!(
            "the {} is {} but the {} is {}{}",
            pick(rng, ASPECTS),
            pick(rng, other),
            pick(rng, ASPECTS),
            pick(rng, INTENSIFIERS),
            pick(rng, own)
        ),
        3 => pick(rng, frames).replace("{adj}", pick(rng, own)),
        _ => format!(
            "{} {} with a {} {}",
            pick(rng, SUBJECTS),
            if positive { "shines" } else { "stumbles" },
            pick(rng, own),
            pick(rng, ASPECTS)
        ),
    }
}

/// Short labeled movie reviews over [`REVIEW_CLASSES`], roughly balanced,
/// with unique texts.
pub fn movie_reviews(n: usize, seed: u64) -> Vec<(String, ClassId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let label: ClassId = rng.random_range(0..2);
        let sentences = rng.random_range(1..=3);
        let mut parts: Vec<String> = (0..sentences)
            .map(|_| review_sentence(&mut rng, label == 1))
            .collect();
        // an occasional off-polarity aside keeps the task from being trivial
        if rng.random_bool(0.25) {
            parts.insert(0, review_sentence(&mut rng, label == 0));
        }
        let mut text = parts.join(". ");
        text.push('.');
        let mut chars = text.chars();
        let text: String = match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => text,
        };
        if seen.insert(text.clone()) {
            out.push((text, label));
        }
    }
    out
}

/// Parameters of the two-vocabulary corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that each token comes from the document's own class vocabulary.
    pub own_vocab_prob: f64,
    pub zipf_exponent: f64,
    /// Fraction of labels flipped to the other class.
    pub label_noise: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            min_len: 3,
            max_len: 12,
            own_vocab_prob: 1.0,
            zipf_exponent: 1.0,
            label_noise: 0.05,
        }
    }
}

const SYLLABLES: [[&str; 6]; 2] = [
    ["ka", "lo", "mi", "nu", "ra", "pe"],
    ["ti", "bo", "sa", "fu", "ge", "dy"],
];

/// `size` distinct pseudo-words for `class`. The two classes use syllable sets
/// with disjoint first letters, so their vocabularies never overlap.
pub fn class_vocabulary(class: usize, size: usize) -> Vec<String> {
    let syl = &SYLLABLES[class % 2];
    let base = syl.len();
    assert!(size <= base * base * base, "vocabulary too large");
    (0..size)
        .map(|i| {
            format!(
                "{}{}{}",
                syl[i / (base * base)],
                syl[(i / base) % base],
                syl[i % base]
            )
        })
        .collect()
}

/// Two-class corpus where class c draws words from its own Zipf-weighted
/// vocabulary. Returns `(text, label, flipped)` with unique texts.
pub fn two_vocab(n: usize, config: &VocabConfig, seed: u64) -> Vec<(String, ClassId, bool)> {
    assert!(config.min_len >= 1 && config.min_len <= config.max_len);
    let vocab = [
        class_vocabulary(0, config.vocab_size),
        class_vocabulary(1, config.vocab_size),
    ];
    let weights: Vec<f64> = (0..config.vocab_size)
        .map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let class: ClassId = rng.random_range(0..2);
        let len = rng.random_range(config.min_len..=config.max_len);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                let c = if rng.random_bool(config.own_vocab_prob) { class } else { 1 - class };
                vocab[c][zipf.sample(&mut rng)].as_str()
            })
            .collect();
        let flipped = rng.random_bool(config.label_noise);
        let text = words.join(" ");
        if seen.insert(text.clone()) {
            out.push((text, if flipped { 1 - class } else { class }, flipped));
        }
    }
    out
}

/// Writes `text,label` CSV that [`crate::corpus::load_dataset`] reads back.
pub fn write_csv<W: Write>(
    out: W,
    class_names: &[&str],
    records: &[(String, ClassId)],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["text", "label"])?;
    for (text, label) in records {
        w.write_record([text.as_str(), class_names[*label]])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::tokenize;

    #[test]
    fn reviews_are_unique_and_deterministic() {
        let a = movie_reviews(500, 1);
        assert_eq!(a, movie_reviews(500, 1));
        let texts: HashSet<_> = a.iter().map(|(t, _)| t).collect();
        assert_eq!(texts.len(), 500);
        let pos = a.iter().filter(|(_, l)| *l == 1).count();
        assert!((200..300).contains(&pos));
    }

    #[test]
    fn vocabularies_disjoint() {
        let a: HashSet<_> = class_vocabulary(0, 50).into_iter().collect();
        let b: HashSet<_> = class_vocabulary(1, 50).into_iter().collect();
        assert_eq!((a.len(), b.len()), (50, 50));
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn two_vocab_noise_and_purity() {
        let cfg = VocabConfig::default();
        let data = two_vocab(2000, &cfg, 3);
        let flipped = data.iter().filter(|r| r.2).count() as f64 / 2000.0;
        assert!((flipped - 0.05).abs() < 0.02, "flip rate {flipped}");
        let vocab1: HashSet<_> = class_vocabulary(1, 50).into_iter().collect();
        for (text, label, flipped) in &data {
            let true_class = if *flipped { 1 - label } else { *label };
            assert!(tokenize(text).iter().all(|w| vocab1.contains(w) == (true_class == 1)));
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let records = movie_reviews(20, 0);
        write_csv(std::fs::File::create(&path).unwrap(), &REVIEW_CLASSES, &records).unwrap();
        let ds = crate::corpus::load_dataset(
            &path,
            crate::corpus::DataFormat::Csv,
            crate::corpus::Split::Train,
            None,
        )
        .unwrap();
        assert_eq!(ds.class_names, REVIEW_CLASSES.map(String::from).to_vec());
        for (s, (t, l)) in ds.samples.iter().zip(&records) {
            assert_eq!((&s.text, s.gold_label), (t, Some(*l)));
        }
    }
}
