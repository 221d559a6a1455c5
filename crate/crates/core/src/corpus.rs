//! Datasets, the labeled/unlabeled pool partition, and stratified sampling.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Dense sample identifier, assigned in file order.
pub type SampleId = usize;

/// Index into a dataset's `class_names`.
pub type ClassId = usize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("requested {requested} samples but only {available} are available")]
    Bounds { requested: usize, available: usize },
    #[error("sample {0} is already labeled")]
    AlreadyLabeled(SampleId),
    #[error("sample {0} is not in the unlabeled pool")]
    NotUnlabeled(SampleId),
    #[error("sample {0} appears more than once in one request")]
    DuplicateId(SampleId),
    #[error("unknown class name {name:?}; valid names: {valid:?}")]
    UnknownClass { name: String, valid: Vec<String> },
    #[error("{ids} ids but {labels} labels")]
    LengthMismatch { ids: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Unlabeled,
    Llm,
    Human,
    Seed,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelSource::Unlabeled => "unlabeled",
            LabelSource::Llm => "llm",
            LabelSource::Human => "human",
            LabelSource::Seed => "seed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(DataFormat::Csv),
            "jsonl" | "ndjson" => Some(DataFormat::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(format!("unknown format {other:?}; expected csv or jsonl")),
        }
    }
}

/// One text instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub text: String,
    pub gold_label: Option<ClassId>,
    pub assigned_label: Option<ClassId>,
    pub source: LabelSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    /// Builds a dataset from `(text, gold class)` pairs, checking the class list.
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        records: Vec<(String, Option<ClassId>)>,
        split: Split,
    ) -> Result<Self, CorpusError> {
        validate_class_names(&class_names)?;
        let mut samples = Vec::with_capacity(records.len());
        for (id, (text, gold)) in records.into_iter().enumerate() {
            if let Some(c) = gold {
                if c >= class_names.len() {
                    return Err(CorpusError::Invalid(format!(
                        "sample {id} has class index {c} but only {} classes exist",
                        class_names.len()
                    )));
                }
            }
            samples.push(Sample {
                id,
                text,
                gold_label: gold,
                assigned_label: None,
                source: LabelSource::Unlabeled,
            });
        }
        Ok(Self {
            name: name.into(),
            class_names,
            samples,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sample(&self, id: SampleId) -> &Sample {
        &self.samples[id]
    }

    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Case-insensitive class lookup, used when matching free-form model output.
    pub fn class_id_ignore_case(&self, name: &str) -> Option<ClassId> {
        class_id_ignore_case(&self.class_names, name)
    }

    pub fn class_name(&self, class: ClassId) -> &str {
        &self.class_names[class]
    }

    pub fn has_gold_labels(&self) -> bool {
        self.samples.iter().all(|s| s.gold_label.is_some())
    }

    /// Ids of samples that lack a gold label.
    pub fn missing_gold(&self) -> Vec<SampleId> {
        self.samples
            .iter()
            .filter(|s| s.gold_label.is_none())
            .map(|s| s.id)
            .collect()
    }

    /// Gold class of every sample, or `None` when any label is missing.
    pub fn gold_labels(&self) -> Option<Vec<ClassId>> {
        self.samples.iter().map(|s| s.gold_label).collect()
    }

    /// Keeps only the listed ids, renumbering densely in the given order.
    pub fn subset(&self, ids: &[SampleId]) -> Dataset {
        let samples = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| Sample {
                id: new_id,
                ..self.samples[old].clone()
            })
            .collect();
        Dataset {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            samples,
            split: self.split,
        }
    }
}

pub(crate) fn class_id_ignore_case(class_names: &[String], name: &str) -> Option<ClassId> {
    let name = name.trim();
    class_names
        .iter()
        .position(|c| c == name)
        .or_else(|| {
            let folded = name.to_lowercase();
            class_names.iter().position(|c| c.to_lowercase() == folded)
        })
}

fn validate_class_names(class_names: &[String]) -> Result<(), CorpusError> {
    if class_names.is_empty() {
        return Err(CorpusError::Invalid("class list is empty".into()));
    }
    let mut seen = HashSet::new();
    for c in class_names {
        if !seen.insert(c.as_str()) {
            return Err(CorpusError::Invalid(format!("duplicate class name {c:?}")));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawRecord {
    text: Option<String>,
    label: Option<String>,
}

/// Loads a `text`/`label` dataset.
///
/// When `declared_classes` is `None` the class list is the sorted set of observed
/// labels. An empty label field means "no gold label".
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    split: Split,
    declared_classes: Option<&[String]>,
) -> Result<Dataset, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parse_err = |line: u64, message: String| CorpusError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let file = File::open(path).map_err(io_err)?;
    // (line, text, label)
    let mut raw: Vec<(u64, String, Option<String>)> = Vec::new();

    match format {
        DataFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(BufReader::new(file));
            let headers = reader
                .headers()
                .map_err(|e| parse_err(1, e.to_string()))?
                .clone();
            let text_col = headers.iter().position(|h| h.trim() == "text");
            let label_col = headers.iter().position(|h| h.trim() == "label");
            let (text_col, label_col) = match (text_col, label_col) {
                (Some(t), Some(l)) => (t, l),
                _ => {
                    return Err(parse_err(
                        1,
                        "header must contain `text` and `label` columns".into(),
                    ))
                }
            };
            for record in reader.records() {
                let record = record.map_err(|e| {
                    let line = e.position().map(|p| p.line()).unwrap_or(0);
                    parse_err(line, e.to_string())
                })?;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let text = record
                    .get(text_col)
                    .ok_or_else(|| parse_err(line, "missing `text` field".into()))?;
                let label = record
                    .get(label_col)
                    .ok_or_else(|| parse_err(line, "missing `label` field".into()))?;
                raw.push((line, text.to_string(), non_empty(label)));
            }
        }
        DataFormat::Jsonl => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line_no = idx as u64 + 1;
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RawRecord = serde_json::from_str(&line)
                    .map_err(|e| parse_err(line_no, e.to_string()))?;
                let text = rec
                    .text
                    .ok_or_else(|| parse_err(line_no, "missing `text` field".into()))?;
                let label = rec
                    .label
                    .ok_or_else(|| parse_err(line_no, "missing `label` field".into()))?;
                raw.push((line_no, text, non_empty(&label)));
            }
        }
    }

    let class_names: Vec<String> = match declared_classes {
        Some(classes) => classes.to_vec(),
        None => raw
            .iter()
            .filter_map(|(_, _, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if class_names.is_empty() {
        return Err(CorpusError::Invalid(format!(
            "{}: no class names declared or observed",
            path.display()
        )));
    }
    validate_class_names(&class_names)?;

    let mut records = Vec::with_capacity(raw.len());
    for (line, text, label) in raw {
        let gold = match label {
            None => None,
            Some(l) => Some(class_names.iter().position(|c| *c == l).ok_or_else(|| {
                parse_err(
                    line,
                    format!("unknown label {l:?}; declared classes are {class_names:?}"),
                )
            })?),
        };
        records.push((text.nfc().collect::<String>(), gold));
    }

    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Dataset::new(name, class_names, records, split)
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Largest-remainder apportionment of `k` over `counts`.
///
/// Ties between equal remainders go to the lower index. Classes with zero
/// members always get a zero quota.
pub fn apportion(counts: &[usize], k: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 || k == 0 {
        return vec![0; counts.len()];
    }
    // Exact quota k*n_c/total as integer part plus remainder numerator (over total).
    let mut quotas: Vec<usize> = counts.iter().map(|&n| k * n / total).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| ((k * n) % total, c))
        .collect();
    let assigned: usize = quotas.iter().sum();
    let leftover = k - assigned;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().take(leftover) {
        quotas[c] += 1;
    }
    quotas
}

/// Output of [`stratified_sample`]; both lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratifiedDraw {
    pub selected: Vec<SampleId>,
    pub remainder: Vec<SampleId>,
}

/// Draws `k` of `ids` preserving class proportions.
///
/// `class_of` gives the stratum for each id. Ids are grouped by class in ascending
/// order before the seeded shuffle, so input order does not matter.
pub fn stratified_sample_ids(
    ids: &[SampleId],
    class_of: impl Fn(SampleId) -> ClassId,
    num_classes: usize,
    k: usize,
    seed: u64,
) -> Result<StratifiedDraw, CorpusError> {
    if k > ids.len() {
        return Err(CorpusError::Bounds {
            requested: k,
            available: ids.len(),
        });
    }
    let mut by_class: Vec<Vec<SampleId>> = vec![Vec::new(); num_classes];
    for &id in ids {
        by_class[class_of(id)].push(id);
    }
    for (c, members) in by_class.iter_mut().enumerate() {
        members.sort_unstable();
        if members.is_empty() {
            tracing::warn!(class = c, "class has no samples; skipped in stratified draw");
        }
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = apportion(&counts, k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(k);
    let mut remainder = Vec::with_capacity(ids.len() - k);
    for (members, quota) in by_class.iter_mut().zip(quotas) {
        members.shuffle(&mut rng);
        selected.extend_from_slice(&members[..quota]);
        remainder.extend_from_slice(&members[quota..]);
    }
    selected.sort_unstable();
    remainder.sort_unstable();
    Ok(StratifiedDraw {
        selected,
        remainder,
    })
}

/// Stratified draw of `k` samples over a dataset's gold labels.
///
/// Samples without a gold label cannot be stratified and are rejected.
pub fn stratified_sample(
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<StratifiedDraw, CorpusError> {
    let missing = dataset.missing_gold();
    if !missing.is_empty() {
        return Err(CorpusError::Invalid(format!(
            "stratified sampling needs gold labels; {} samples lack one (first id {})",
            missing.len(),
            missing[0]
        )));
    }
    let ids: Vec<SampleId> = (0..dataset.len()).collect();
    stratified_sample_ids(
        &ids,
        |id| dataset.samples[id].gold_label.expect("checked above"),
        dataset.num_classes(),
        k,
        seed,
    )
}

/// The labeled set L and unlabeled pool U over a train dataset.
#[derive(Debug, Clone)]
pub struct LabelPool {
    dataset: Arc<Dataset>,
    assignments: Vec<Option<(ClassId, LabelSource)>>,
    labeled: BTreeSet<SampleId>,
    unlabeled: BTreeSet<SampleId>,
}

impl LabelPool {
    /// Every sample starts unlabeled.
    pub fn new(dataset: Arc<Dataset>) -> Self {
        let n = dataset.len();
        Self {
            dataset,
            assignments: vec![None; n],
            labeled: BTreeSet::new(),
            unlabeled: (0..n).collect(),
        }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn labeled(&self) -> &BTreeSet<SampleId> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn assignment(&self, id: SampleId) -> Option<(ClassId, LabelSource)> {
        self.assignments[id]
    }

    /// The sample with its current assignment filled in.
    pub fn sample(&self, id: SampleId) -> Sample {
        let mut s = self.dataset.samples[id].clone();
        if let Some((label, source)) = self.assignments[id] {
            s.assigned_label = Some(label);
            s.source = source;
        }
        s
    }

    /// Labeled `(id, class)` pairs in ascending id order.
    pub fn labeled_pairs(&self) -> Vec<(SampleId, ClassId)> {
        self.labeled
            .iter()
            .map(|&id| (id, self.assignments[id].expect("labeled id has assignment").0))
            .collect()
    }

    /// Moves `ids` from U to L with the given labels and provenance.
    ///
    /// Validation happens before any mutation, so on error the pool is unchanged.
    pub fn move_to_labeled(
        &mut self,
        ids: &[SampleId],
        labels: &[ClassId],
        source: LabelSource,
    ) -> Result<(), CorpusError> {
        if ids.len() != labels.len() {
            return Err(CorpusError::LengthMismatch {
                ids: ids.len(),
                labels: labels.len(),
            });
        }
        if source == LabelSource::Unlabeled {
            return Err(CorpusError::Invalid(
                "cannot label a sample with source `unlabeled`".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (&id, &label) in ids.iter().zip(labels) {
            if !seen.insert(id) {
                return Err(CorpusError::DuplicateId(id));
            }
            if self.labeled.contains(&id) {
                return Err(CorpusError::AlreadyLabeled(id));
            }
            if !self.unlabeled.contains(&id) {
                return Err(CorpusError::NotUnlabeled(id));
            }
            if label >= self.dataset.num_classes() {
                return Err(CorpusError::UnknownClass {
                    name: label.to_string(),
                    valid: self.dataset.class_names.clone(),
                });
            }
        }
        for (&id, &label) in ids.iter().zip(labels) {
            self.unlabeled.remove(&id);
            self.labeled.insert(id);
            self.assignments[id] = Some((label, source));
        }
        Ok(())
    }

    /// Same as [`move_to_labeled`](Self::move_to_labeled) but with class names.
    pub fn move_to_labeled_named(
        &mut self,
        ids: &[SampleId],
        labels: &[&str],
        source: LabelSource,
    ) -> Result<(), CorpusError> {
        let classes = labels
            .iter()
            .map(|name| {
                self.dataset
                    .class_id(name)
                    .ok_or_else(|| CorpusError::UnknownClass {
                        name: name.to_string(),
                        valid: self.dataset.class_names.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.move_to_labeled(ids, &classes, source)
    }
}
