//! The trainable model of the active-learning loop.
//!
//! The loop only sees [`Learner`] and [`Scorer`]; the bundled backend is a
//! feature-hashed multinomial logistic regression.

mod features;
mod model;

pub use features::{cosine, featurize, stable_hash, tokenize, FeatureVector, DEFAULT_DIMENSION};
pub use model::{batch_gradient, train, Gradient, LogisticLearner, LogisticModel, TrainConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClassId;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid training arguments: {0}")]
    Argument(String),
    #[error("training diverged (non-finite weights)")]
    Diverged,
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-class probabilities, parallel to the dataset's class names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that every entry is in [0, 1] and the total is 1 within 1e-9.
    pub fn new(probabilities: Vec<f64>) -> Result<Self, ClassifierError> {
        if probabilities.is_empty() {
            return Err(ClassifierError::Argument("empty probability vector".into()));
        }
        if probabilities
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(ClassifierError::Argument(format!(
                "probabilities out of range: {probabilities:?}"
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ClassifierError::Argument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(probabilities))
    }

    pub fn from_scores(scores: &[f64]) -> Self {
        Self(model::softmax(scores))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> ClassId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// 1-based epoch whose snapshot was returned.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    /// Validation accuracy after each epoch, empty without early stopping.
    pub val_accuracy: Vec<f64>,
    pub train_accuracy: f64,
    pub train_size: usize,
    pub val_size: usize,
}

/// A trained model that can score text.
pub trait Scorer: Send + Sync {
    fn predict_proba(&self, text: &str) -> ProbVector;
    fn num_classes(&self) -> usize;
}

/// Fits a fresh model from labeled text. Implementations must be deterministic
/// in `(examples, class_names, seed)`.
pub trait Learner {
    type Model: Scorer;

    fn fit(
        &self,
        examples: &[(&str, ClassId)],
        class_names: &[String],
        seed: u64,
    ) -> Result<(Self::Model, TrainReport), ClassifierError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(ProbVector::uniform(4).argmax(), 0);
        assert_eq!(ProbVector::new(vec![0.2, 0.4, 0.4]).unwrap().argmax(), 1);
    }

    #[test]
    fn validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = ProbVector::from_scores(&[1000.0, -1000.0, 3.0]);
        assert!((p.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.argmax(), 0);
    }
}
