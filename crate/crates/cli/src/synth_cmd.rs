//! Synthetic train/test splits, in memory or as CSV files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixlabel_core::corpus::{ClassId, Dataset, Split};
use mixlabel_core::synth::{movie_reviews, two_vocab, write_csv, VocabConfig, REVIEW_CLASSES};

pub const TWO_VOCAB_CLASSES: [&str; 2] = ["A", "B"];

/// Labeled records for both splits of one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecords {
    pub class_names: Vec<String>,
    pub train: Vec<(String, ClassId)>,
    pub test: Vec<(String, ClassId)>,
}

impl SplitRecords {
    pub fn datasets(&self, name: &str) -> Result<(Dataset, Dataset)> {
        let build = |records: &[(String, ClassId)], split| {
            Dataset::new(
                name,
                self.class_names.clone(),
                records.iter().map(|(t, l)| (t.clone(), Some(*l))).collect(),
                split,
            )
        };
        Ok((build(&self.train, Split::Train)?, build(&self.test, Split::Test)?))
    }

    /// Writes `train.csv` and `test.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let names: Vec<&str> = self.class_names.iter().map(String::as_str).collect();
        let mut paths = Vec::new();
        for (file, records) in [("train.csv", &self.train), ("test.csv", &self.test)] {
            let path = dir.join(file);
            let f = std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            write_csv(f, &names, records)?;
            paths.push(path);
        }
        let test = paths.pop().expect("two paths");
        let train = paths.pop().expect("two paths");
        Ok((train, test))
    }
}

/// Movie-review sentiment: one draw of unique texts, split in order.
pub fn review_splits(train: usize, test: usize, seed: u64) -> SplitRecords {
    let mut all = movie_reviews(train + test, seed);
    let test_records = all.split_off(train);
    SplitRecords {
        class_names: REVIEW_CLASSES.map(String::from).to_vec(),
        train: all,
        test: test_records,
    }
}

/// Two-vocabulary corpus: training labels carry the configured noise, test
/// labels are the true classes.
pub fn two_vocab_splits(train: usize, test: usize, config: &VocabConfig, seed: u64) -> SplitRecords {
    let mut all = two_vocab(train + test, config, seed);
    let test_part = all.split_off(train);
    SplitRecords {
        class_names: TWO_VOCAB_CLASSES.map(String::from).to_vec(),
        train: all.into_iter().map(|(t, l, _)| (t, l)).collect(),
        test: test_part
            .into_iter()
            .map(|(t, l, flipped)| (t, if flipped { 1 - l } else { l }))
            .collect(),
    }
}
