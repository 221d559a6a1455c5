//! Multinomial logistic regression over hashed features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureVector, DEFAULT_DIMENSION};
use super::{ClassifierError, Learner, ProbVector, Scorer, TrainReport};
use crate::corpus::{stratified_sample_ids, ClassId};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping and trains on every sample for `max_epochs`.
    pub patience: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub dimension: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 0.1,
            max_epochs: 100,
            patience: 5,
            val_fraction: 0.1,
            batch_size: 8,
            dimension: DEFAULT_DIMENSION,
        }
    }
}

/// Trained weights. Row `c` of `weights` holds the `dimension` coefficients of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub class_names: Vec<String>,
    pub config: TrainConfig,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    pub fn zeros(class_names: Vec<String>, config: TrainConfig) -> Self {
        let c = class_names.len();
        Self {
            weights: vec![0.0; c * config.dimension],
            bias: vec![0.0; c],
            class_names,
            config,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn scores(&self, x: &FeatureVector) -> Vec<f64> {
        linear_scores(&self.weights, &self.bias, self.dimension(), x)
    }

    pub fn predict_features(&self, x: &FeatureVector) -> ProbVector {
        ProbVector::from_scores(&self.scores(x))
    }

    pub fn predict_proba(&self, text: &str) -> ProbVector {
        self.predict_features(&featurize(text, self.dimension()))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|w| w.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = serde_json::to_vec(&ModelHeader {
            class_names: self.class_names.clone(),
            config: self.config.clone(),
        })?;
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for w in self.weights.iter().chain(&self.bias) {
            out.write_all(&w.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ClassifierError::Format("not a model file".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != MODEL_FORMAT_VERSION {
            return Err(ClassifierError::Format(format!(
                "unsupported model format version {version}"
            )));
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header)?;
        let c = header.class_names.len();
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, ClassifierError> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut u64buf)?;
                v.push(f64::from_le_bytes(u64buf));
            }
            Ok(v)
        };
        let weights = read_f64s(c * header.config.dimension)?;
        let bias = read_f64s(c)?;
        Ok(Self {
            class_names: header.class_names,
            config: header.config,
            weights,
            bias,
        })
    }
}

const MODEL_MAGIC: &[u8; 4] = b"MXLM";
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    class_names: Vec<String>,
    config: TrainConfig,
}

impl Scorer for LogisticModel {
    fn predict_proba(&self, text: &str) -> ProbVector {
        LogisticModel::predict_proba(self, text)
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn linear_scores(weights: &[f64], bias: &[f64], dimension: usize, x: &FeatureVector) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(c, b)| {
            let row = &weights[c * dimension..(c + 1) * dimension];
            b + x
                .entries()
                .iter()
                .map(|&(i, v)| row[i as usize] * v)
                .sum::<f64>()
        })
        .collect()
}

/// Sparse gradient of the mean cross-entropy over a batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    /// `(class * dimension + feature, value)`; indices may repeat and add up.
    pub weights: Vec<(usize, f64)>,
    pub bias: Vec<f64>,
    pub loss: f64,
}

impl Gradient {
    pub fn to_dense(&self, num_classes: usize, dimension: usize) -> Vec<f64> {
        let mut dense = vec![0.0; num_classes * dimension];
        for &(i, v) in &self.weights {
            dense[i] += v;
        }
        dense
    }
}

/// Mean cross-entropy of `batch` and its gradient with respect to weights and bias.
pub fn batch_gradient(
    weights: &[f64],
    bias: &[f64],
    dimension: usize,
    batch: &[(&FeatureVector, ClassId)],
) -> Gradient {
    let c = bias.len();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut grad = Gradient {
        weights: Vec::with_capacity(batch.iter().map(|(x, _)| x.len() * c).sum()),
        bias: vec![0.0; c],
        loss: 0.0,
    };
    for &(x, y) in batch {
        let scores = linear_scores(weights, bias, dimension, x);
        let probs = softmax(&scores);
        grad.loss -= probs[y].max(f64::MIN_POSITIVE).ln() * scale;
        for (class, p) in probs.iter().enumerate() {
            let coef = (p - if class == y { 1.0 } else { 0.0 }) * scale;
            grad.bias[class] += coef;
            if coef != 0.0 {
                for &(i, v) in x.entries() {
                    grad.weights.push((class * dimension + i as usize, coef * v));
                }
            }
        }
    }
    grad
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Trains [`LogisticModel`]s with a fixed configuration.
#[derive(Debug, Clone, Default)]
pub struct LogisticLearner {
    pub config: TrainConfig,
}

impl LogisticLearner {
    pub fn new(config: TrainConfig) -> Self {
        Self { config }
    }

    /// Fits from scratch. `seed` overrides `config.seed`.
    pub fn train(
        &self,
        examples: &[(&str, ClassId)],
        class_names: &[String],
        seed: u64,
    ) -> Result<(LogisticModel, TrainReport), ClassifierError> {
        let mut config = self.config.clone();
        config.seed = seed;
        train(examples, class_names, &config)
    }
}

impl Learner for LogisticLearner {
    type Model = LogisticModel;

    fn fit(
        &self,
        examples: &[(&str, ClassId)],
        class_names: &[String],
        seed: u64,
    ) -> Result<(LogisticModel, TrainReport), ClassifierError> {
        self.train(examples, class_names, seed)
    }
}

/// Mini-batch gradient descent with validation-based early stopping.
///
/// The returned model is the snapshot from the best validation epoch. An epoch
/// counts as an improvement when validation accuracy rises, or stays equal while
/// validation loss falls.
pub fn train(
    examples: &[(&str, ClassId)],
    class_names: &[String],
    config: &TrainConfig,
) -> Result<(LogisticModel, TrainReport), ClassifierError> {
    if examples.is_empty() {
        return Err(ClassifierError::Argument("no training examples".into()));
    }
    if class_names.is_empty() {
        return Err(ClassifierError::Argument("no classes".into()));
    }
    if config.dimension == 0 || config.batch_size == 0 || config.max_epochs == 0 {
        return Err(ClassifierError::Argument(
            "dimension, batch_size and max_epochs must be positive".into(),
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ClassifierError::Argument("learning rate must be positive".into()));
    }
    let c = class_names.len();
    if let Some(&(_, bad)) = examples.iter().find(|(_, y)| *y >= c) {
        return Err(ClassifierError::Argument(format!(
            "label index {bad} out of range for {c} classes"
        )));
    }

    let features: Vec<FeatureVector> = examples
        .iter()
        .map(|(t, _)| featurize(t, config.dimension))
        .collect();
    let all: Vec<usize> = (0..examples.len()).collect();

    let early_stopping = config.patience > 0;
    let (train_idx, val_idx) = if early_stopping {
        let want = config.val_fraction * examples.len() as f64;
        if want.is_nan() || want < 1.0 {
            return Err(ClassifierError::Argument(format!(
                "validation fraction {} of {} examples leaves no validation sample",
                config.val_fraction,
                examples.len()
            )));
        }
        let k = (want.round() as usize).clamp(1, examples.len());
        let draw = stratified_sample_ids(
            &all,
            |i| examples[i].1,
            c,
            k,
            derive_seed(config.seed, "validation-split", 0),
        )
        .map_err(|e| ClassifierError::Argument(e.to_string()))?;
        (draw.remainder, draw.selected)
    } else {
        (all, Vec::new())
    };
    if train_idx.is_empty() {
        return Err(ClassifierError::Argument(
            "validation split leaves no training examples".into(),
        ));
    }

    let mut model = LogisticModel::zeros(class_names.to_vec(), config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", 0));
    let mut order = train_idx.clone();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, f64, LogisticModel)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&FeatureVector, ClassId)> =
                chunk.iter().map(|&i| (&features[i], examples[i].1)).collect();
            let grad = batch_gradient(&model.weights, &model.bias, config.dimension, &batch);
            for (i, g) in grad.weights {
                model.weights[i] -= config.learning_rate * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
                *b -= config.learning_rate * g;
            }
        }
        report.epochs_run = epoch;
        if !early_stopping {
            continue;
        }
        let (acc, loss) = evaluate(&model, &features, examples, &val_idx);
        report.val_accuracy.push(acc);
        let improved = match &best {
            None => true,
            Some((best_acc, best_loss, _)) => acc > *best_acc || (acc == *best_acc && loss < *best_loss),
        };
        if improved {
            best = Some((acc, loss, model.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let model = match best {
        Some((acc, _, snapshot)) => {
            report.best_val_accuracy = Some(acc);
            snapshot
        }
        None => {
            report.best_epoch = report.epochs_run;
            model
        }
    };
    if !model.is_finite() {
        return Err(ClassifierError::Diverged);
    }
    report.train_accuracy = evaluate(&model, &features, examples, &train_idx).0;
    report.train_size = train_idx.len();
    report.val_size = val_idx.len();
    Ok((model, report))
}

fn evaluate(
    model: &LogisticModel,
    features: &[FeatureVector],
    examples: &[(&str, ClassId)],
    idx: &[usize],
) -> (f64, f64) {
    if idx.is_empty() {
        return (0.0, 0.0);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for &i in idx {
        let p = model.predict_features(&features[i]);
        if p.argmax() == examples[i].1 {
            correct += 1;
        }
        loss -= p.probabilities()[examples[i].1].max(f64::MIN_POSITIVE).ln();
    }
    let n = idx.len() as f64;
    (correct as f64 / n, loss / n)
}
