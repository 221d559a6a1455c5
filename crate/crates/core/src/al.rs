//! The active-learning driver: seed, then query → annotate → route → retrain.

use std::sync::Arc;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    estimate_tokens, AnnotatorConfig, AnnotatorError, ChatBackend, Demo, LlmAnnotator, PromptMeta,
};
use crate::classifier::{ClassifierError, Learner, ProbVector, Scorer, TrainConfig, TrainReport};
use crate::corpus::{
    stratified_sample, ClassId, CorpusError, Dataset, LabelPool, LabelSource, SampleId,
};
use crate::ledger::{Ledger, LedgerError, LedgerTags, QualityStats};
use crate::query::{query_batch, QueryError, QueryStrategy};
use crate::router::{route, AnnotationMode, HumanAnnotator, RouterError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Which labeled samples may serve as prompt demonstrations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoPool {
    /// Seed and human-labeled samples only.
    #[default]
    SeedAndHuman,
    /// Everything in L, including LLM labels.
    AllLabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: String,
    pub seed: u64,
    pub mode: AnnotationMode,
    pub strategy: QueryStrategy,
    pub init_size: usize,
    pub iterations: usize,
    pub batch_k: usize,
    pub classifier: TrainConfig,
    pub annotator: AnnotatorConfig,
    /// Plural description used in the prompt, e.g. "movie reviews".
    pub text_type: String,
    pub demo_pool: DemoPool,
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            seed: 0,
            mode: AnnotationMode::Mixed,
            strategy: QueryStrategy::BreakingTies,
            init_size: 25,
            iterations: 10,
            batch_k: 50,
            classifier: TrainConfig::default(),
            annotator: AnnotatorConfig::default(),
            text_type: "texts".into(),
            demo_pool: DemoPool::SeedAndHuman,
            runs: 3,
        }
    }
}

impl RunConfig {
    /// Labeled-set size after all iterations.
    pub fn final_labeled(&self) -> usize {
        self.init_size + self.iterations * self.batch_k
    }

    pub fn validate(&self, train_size: usize) -> Result<(), RunError> {
        if self.init_size == 0 {
            return Err(RunError::Config("init_size must be positive".into()));
        }
        if self.iterations > 0 && self.batch_k == 0 {
            return Err(RunError::Config("batch_k must be positive".into()));
        }
        if self.runs == 0 {
            return Err(RunError::Config("runs must be positive".into()));
        }
        if self.final_labeled() > train_size {
            return Err(RunError::Config(format!(
                "init_size + iterations * batch_k = {} exceeds the {} training samples",
                self.final_labeled(),
                train_size
            )));
        }
        if self.mode == AnnotationMode::Mixed {
            self.annotator.validate()?;
        }
        Ok(())
    }

    /// The same configuration with the seed cleared, for comparing runs.
    pub fn without_seed(&self) -> RunConfig {
        RunConfig {
            seed: 0,
            ..self.clone()
        }
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-{}-s{}",
            self.dataset,
            self.mode,
            self.strategy.abbreviation(),
            self.seed
        )
    }
}

/// Sub-seeds used by a run, echoed in the result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub base: u64,
    pub init: u64,
    pub train: Vec<u64>,
    pub query: Vec<u64>,
    pub annotate: Vec<u64>,
}

impl RunSeeds {
    pub fn derive(base: u64, iterations: usize) -> Self {
        let per = |tag: &str, n: usize| (0..n as u64).map(|i| derive_seed(base, tag, i)).collect();
        Self {
            base,
            init: derive_seed(base, "init", 0),
            train: per("train", iterations + 1),
            query: per("query", iterations + 1),
            annotate: per("annotate", iterations + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 is the model trained on the seed set.
    pub iteration: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test_accuracy: f64,
    pub cumulative_cost: Decimal,
    pub iteration_cost: Decimal,
    pub llm_labeled: usize,
    pub escalations: usize,
    pub human_labeled: usize,
    /// LLM verdict quality against gold; empty in human mode.
    pub annotation: QualityStats,
    pub train: TrainReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveAuc {
    pub value: f64,
    /// False when fewer than two points made the area undefined; `value` then
    /// holds the single accuracy.
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: RunConfig,
    pub seeds: RunSeeds,
    pub curve: Vec<IterationRecord>,
    pub final_accuracy: f64,
    pub auc: CurveAuc,
    pub total_cost: Decimal,
    pub annotation: QualityStats,
    /// Final `(id, label, source)` for every labeled sample, by id.
    pub labels: Vec<(SampleId, ClassId, LabelSource)>,
    pub completed: bool,
}

impl RunResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.test_accuracy).collect()
    }
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("run {} failed after {} curve points: {error}", partial.run_id, partial.curve.len())]
pub struct RunFailure {
    pub partial: Box<RunResult>,
    #[source]
    pub error: RunError,
}

/// Hooks for progress reporting and live status.
pub trait RunObserver {
    fn on_iteration(&mut self, _record: &IterationRecord, _pool: &LabelPool, _ledger: &Ledger) {}
    /// Called before escalated samples are handed to the human channel.
    fn on_escalation(&mut self, _iteration: usize, _ids: &[SampleId]) {}
}

impl RunObserver for () {}

/// The annotation channels available to a run.
#[derive(Clone, Copy)]
pub struct Annotators<'a> {
    /// Required in mixed mode.
    pub llm: Option<&'a dyn ChatBackend>,
    pub human: &'a dyn HumanAnnotator,
}

/// Fraction of argmax predictions equal to the gold label.
pub fn accuracy(model: &dyn Scorer, test: &Dataset) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in &test.samples {
        let Some(gold) = s.gold_label else { continue };
        total += 1;
        if model.predict_proba(&s.text).argmax() == gold {
            correct += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Trapezoidal area over the iteration index divided by the index span.
pub fn curve_auc(accuracies: &[f64]) -> CurveAuc {
    match accuracies {
        [] => CurveAuc {
            value: f64::NAN,
            defined: false,
        },
        [only] => CurveAuc {
            value: *only,
            defined: false,
        },
        _ => {
            let area: f64 = accuracies.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
            CurveAuc {
                value: area / (accuracies.len() - 1) as f64,
                defined: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub mode: AnnotationMode,
    pub strategy: QueryStrategy,
    pub seeds: Vec<u64>,
    pub final_accuracy: MeanSd,
    pub auc: MeanSd,
    pub mean_total_cost: Decimal,
    pub mean_curve: Vec<f64>,
}

/// Means and SDs over runs that differ only in seed.
pub fn aggregate_runs(results: &[RunResult]) -> Result<Aggregate, RunError> {
    let first = results
        .first()
        .ok_or_else(|| RunError::Argument("no runs to aggregate".into()))?;
    let reference = first.config.without_seed();
    for r in &results[1..] {
        if r.config.without_seed() != reference {
            return Err(RunError::Argument(format!(
                "run {} has a different configuration from {}",
                r.run_id, first.run_id
            )));
        }
        if r.curve.len() != first.curve.len() {
            return Err(RunError::Argument(format!(
                "run {} has {} curve points, {} has {}",
                r.run_id,
                r.curve.len(),
                first.run_id,
                first.curve.len()
            )));
        }
    }
    let finals: Vec<f64> = results.iter().map(|r| r.final_accuracy).collect();
    let aucs: Vec<f64> = results.iter().map(|r| r.auc.value).collect();
    let mean_curve = (0..first.curve.len())
        .map(|i| {
            results.iter().map(|r| r.curve[i].test_accuracy).sum::<f64>() / results.len() as f64
        })
        .collect();
    Ok(Aggregate {
        dataset: first.config.dataset.clone(),
        mode: first.config.mode,
        strategy: first.config.strategy,
        seeds: results.iter().map(|r| r.config.seed).collect(),
        final_accuracy: MeanSd::of(&finals),
        auc: MeanSd::of(&aucs),
        mean_total_cost: results.iter().map(|r| r.total_cost).sum::<Decimal>()
            / Decimal::from(results.len()),
        mean_curve,
    })
}

struct Run<'a, L: Learner> {
    config: &'a RunConfig,
    learner: &'a L,
    train: Arc<Dataset>,
    test: &'a Dataset,
    annotators: Annotators<'a>,
    ledger: &'a mut Ledger,
    observer: &'a mut dyn RunObserver,
    seeds: RunSeeds,
    pool: LabelPool,
    curve: Vec<IterationRecord>,
    cost: Decimal,
    quality: QualityStats,
}

impl<L: Learner> Run<'_, L> {
    fn tags(&self, iteration: usize) -> LedgerTags {
        LedgerTags::new(self.config.run_id(), Some(iteration as u32))
    }

    fn fit(&self, iteration: usize) -> Result<(L::Model, TrainReport), RunError> {
        let pairs = self.pool.labeled_pairs();
        let examples: Vec<(&str, ClassId)> = pairs
            .iter()
            .map(|&(id, c)| (self.train.samples[id].text.as_str(), c))
            .collect();
        Ok(self.learner.fit(
            &examples,
            &self.train.class_names,
            self.seeds.train[iteration],
        )?)
    }

    fn check_conservation(&self, iteration: usize) -> Result<(), RunError> {
        let (l, u) = (self.pool.labeled_len(), self.pool.unlabeled_len());
        if l + u != self.train.len() {
            return Err(RunError::Invariant(format!(
                "|L| + |U| = {l} + {u} != {} after iteration {iteration}",
                self.train.len()
            )));
        }
        let expected = self.config.init_size + iteration * self.config.batch_k;
        if l != expected {
            return Err(RunError::Invariant(format!(
                "|L| = {l}, expected {expected} after iteration {iteration}"
            )));
        }
        Ok(())
    }

    fn label_by_human(&mut self, ids: &[SampleId], iteration: usize) -> Result<(), RunError> {
        if ids.is_empty() {
            return Ok(());
        }
        let labels = self.annotators.human.label(&self.train, ids)?;
        if labels.len() != ids.len() {
            return Err(RunError::Invariant(format!(
                "human channel returned {} labels for {} samples",
                labels.len(),
                ids.len()
            )));
        }
        self.pool.move_to_labeled(ids, &labels, LabelSource::Human)?;
        let tags = self.tags(iteration);
        for &id in ids {
            let tokens = estimate_tokens(&self.train.samples[id].text);
            self.cost += self.ledger.record_human(tokens, Some(id), &tags)?;
        }
        Ok(())
    }

    fn demo_pool(&self) -> Vec<Demo> {
        self.pool
            .labeled()
            .iter()
            .filter_map(|&id| {
                let (label, source) = self.pool.assignment(id)?;
                let eligible = match self.config.demo_pool {
                    DemoPool::AllLabeled => true,
                    DemoPool::SeedAndHuman => {
                        matches!(source, LabelSource::Seed | LabelSource::Human)
                    }
                };
                eligible.then(|| Demo {
                    id,
                    text: self.train.samples[id].text.clone(),
                    label,
                })
            })
            .collect()
    }

    /// Returns (llm labeled, escalated, quality).
    fn annotate(
        &mut self,
        ids: &[SampleId],
        iteration: usize,
    ) -> Result<(usize, usize, QualityStats), RunError> {
        match self.config.mode {
            AnnotationMode::HumanOnly => {
                self.label_by_human(ids, iteration)?;
                Ok((0, 0, QualityStats::default()))
            }
            AnnotationMode::Mixed => {
                let llm = self.annotators.llm.ok_or_else(|| {
                    RunError::Config("mixed mode needs an LLM endpoint".into())
                })?;
                let meta = PromptMeta::new(
                    self.config.text_type.clone(),
                    self.train.class_names.clone(),
                );
                let annotator = LlmAnnotator::new(llm, self.config.annotator.clone(), meta);
                let samples: Vec<(SampleId, &str)> = ids
                    .iter()
                    .map(|&id| (id, self.train.samples[id].text.as_str()))
                    .collect();
                let demos = self.demo_pool();
                let batches =
                    annotator.annotate(&samples, &demos, self.seeds.annotate[iteration])?;

                let tags = self.tags(iteration);
                let mut stats = QualityStats::default();
                let mut llm_ids = Vec::new();
                let mut llm_labels = Vec::new();
                let mut escalated = Vec::new();
                for batch in &batches {
                    self.cost += self.ledger.record_llm(batch.usage, &batch.model, &tags)?;
                    let routed = route(batch.batch_ids.iter().copied().zip(&batch.verdicts));
                    for (&id, v) in batch.batch_ids.iter().zip(&batch.verdicts) {
                        if let Some(gold) = self.train.samples[id].gold_label {
                            stats.add(v, gold);
                        }
                    }
                    for (id, label) in routed.llm_labeled {
                        llm_ids.push(id);
                        llm_labels.push(label);
                    }
                    escalated.extend(routed.escalated);
                }
                let covered = llm_ids.len() + escalated.len();
                if covered != ids.len() {
                    return Err(RunError::Invariant(format!(
                        "annotation covered {covered} of {} queried samples",
                        ids.len()
                    )));
                }
                self.pool
                    .move_to_labeled(&llm_ids, &llm_labels, LabelSource::Llm)?;
                self.observer.on_escalation(iteration, &escalated);
                self.label_by_human(&escalated, iteration)?;
                Ok((llm_ids.len(), escalated.len(), stats))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        iteration: usize,
        model: &L::Model,
        train: TrainReport,
        iteration_cost: Decimal,
        llm_labeled: usize,
        escalations: usize,
        annotation: QualityStats,
    ) {
        let human_labeled = match self.config.mode {
            AnnotationMode::HumanOnly if iteration > 0 => self.config.batch_k,
            _ => escalations,
        };
        let record = IterationRecord {
            iteration,
            labeled: self.pool.labeled_len(),
            unlabeled: self.pool.unlabeled_len(),
            test_accuracy: accuracy(model, self.test),
            cumulative_cost: self.cost,
            iteration_cost,
            llm_labeled,
            escalations,
            human_labeled,
            annotation,
            train,
        };
        self.observer.on_iteration(&record, &self.pool, self.ledger);
        self.curve.push(record);
    }

    fn execute(&mut self) -> Result<(), RunError> {
        let draw = stratified_sample(&self.train, self.config.init_size, self.seeds.init)?;
        let gold: Vec<ClassId> = draw
            .selected
            .iter()
            .map(|&id| self.train.samples[id].gold_label.expect("validated"))
            .collect();
        self.pool
            .move_to_labeled(&draw.selected, &gold, LabelSource::Seed)?;
        self.check_conservation(0)?;
        let (mut model, report) = self.fit(0)?;
        self.record(0, &model, report, Decimal::ZERO, 0, 0, QualityStats::default());

        for t in 1..=self.config.iterations {
            let scored: Vec<(SampleId, ProbVector)> = self
                .pool
                .unlabeled()
                .iter()
                .map(|&id| (id, model.predict_proba(&self.train.samples[id].text)))
                .collect();
            let ids = query_batch(
                self.config.strategy,
                &scored,
                self.config.batch_k,
                self.seeds.query[t],
            )?;
            let before = self.cost;
            let (llm_labeled, escalations, stats) = self.annotate(&ids, t)?;
            self.quality.merge(&stats);
            self.check_conservation(t)?;
            let (next, report) = self.fit(t)?;
            model = next;
            let spent = self.cost - before;
            self.record(t, &model, report, spent, llm_labeled, escalations, stats);
        }
        Ok(())
    }

    fn result(&self, completed: bool) -> RunResult {
        let accuracies: Vec<f64> = self.curve.iter().map(|r| r.test_accuracy).collect();
        RunResult {
            run_id: self.config.run_id(),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            final_accuracy: accuracies.last().copied().unwrap_or(f64::NAN),
            auc: curve_auc(&accuracies),
            curve: self.curve.clone(),
            total_cost: self.cost,
            annotation: self.quality,
            labels: self
                .pool
                .labeled()
                .iter()
                .map(|&id| {
                    let (label, source) = self.pool.assignment(id).expect("labeled");
                    (id, label, source)
                })
                .collect(),
            completed,
        }
    }
}

/// Runs one seeded active-learning experiment.
///
/// Both splits need gold labels: the seed set is stratified and labeled from
/// gold, and accuracy is measured against gold. On failure the partial curve is
/// returned inside [`RunFailure`].
pub fn run_al<L: Learner>(
    config: &RunConfig,
    learner: &L,
    train: Arc<Dataset>,
    test: &Dataset,
    annotators: Annotators<'_>,
    ledger: &mut Ledger,
    observer: &mut dyn RunObserver,
) -> Result<RunResult, RunFailure> {
    let seeds = RunSeeds::derive(config.seed, config.iterations);
    let mut run = Run {
        config,
        learner,
        train: Arc::clone(&train),
        test,
        annotators,
        ledger,
        observer,
        seeds,
        pool: LabelPool::new(Arc::clone(&train)),
        curve: Vec::new(),
        cost: Decimal::ZERO,
        quality: QualityStats::default(),
    };
    let checked = preflight(config, &train, test).and_then(|()| run.execute());
    match checked {
        Ok(()) => Ok(run.result(true)),
        Err(error) => Err(RunFailure {
            partial: Box::new(run.result(false)),
            error,
        }),
    }
}

fn preflight(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<(), RunError> {
    config.validate(train.len())?;
    for (split, ds) in [("train", train), ("test", test)] {
        if let Some(first) = ds.missing_gold().first() {
            return Err(RunError::Config(format!(
                "{split} split {:?} needs gold labels; sample {first} has none",
                ds.name
            )));
        }
    }
    if test.is_empty() {
        return Err(RunError::Config("test split is empty".into()));
    }
    if train.class_names != test.class_names {
        return Err(RunError::Config(format!(
            "train classes {:?} differ from test classes {:?}",
            train.class_names, test.class_names
        )));
    }
    Ok(())
}

/// Labels from `result` as a map-friendly list of `(id, label)`.
pub fn label_assignments(result: &RunResult) -> Vec<(SampleId, ClassId)> {
    result.labels.iter().map(|&(id, l, _)| (id, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert!((curve_auc(&[0.8; 11]).value - 0.8).abs() < 1e-12);
        let linear: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        assert!((curve_auc(&linear).value - 0.5).abs() < 1e-12);
        let single = curve_auc(&[0.7]);
        assert_eq!((single.value, single.defined), (0.7, false));
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[0.8, 0.9]);
        assert!((m.mean - 0.85).abs() < 1e-12);
        assert_eq!(MeanSd::of(&[0.5; 3]).sd, 0.0);
        assert_eq!(MeanSd::of(&[0.5]).sd, 0.0);
    }

    #[test]
    fn config_defaults_and_bounds() {
        let c = RunConfig::default();
        assert_eq!((c.init_size, c.iterations, c.batch_k, c.runs), (25, 10, 50, 3));
        assert_eq!(c.final_labeled(), 525);
        assert_eq!(c.annotator.demos_per_class, 3);
        assert!(c.validate(525).is_ok());
        assert!(matches!(c.validate(524), Err(RunError::Config(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_trapezoid_oracle(points in prop::collection::vec(0.0f64..=1.0, 2..30)) {
            // independent form: composite trapezoid with h = 1/(n-1) on [0, 1]
            let n = points.len();
            let h = 1.0 / (n - 1) as f64;
            let inner: f64 = points[1..n - 1].iter().sum();
            let oracle = h * (points[0] / 2.0 + inner + points[n - 1] / 2.0);
            let got = curve_auc(&points);
            prop_assert!(got.defined);
            prop_assert!((got.value - oracle).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got.value));
        }
    }
}
