//! The annotation-quality grid: demos per class × demo strategy on a fixed sample.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixlabel_core::annotator::{
    AnnotatorConfig, AnnotatorError, ChatBackend, Demo, DemoStrategy, LlmAnnotator, PromptMeta,
};
use mixlabel_core::corpus::{stratified_sample, stratified_sample_ids, Dataset, SampleId};
use mixlabel_core::ledger::{quality, Ledger, LedgerTags};
use mixlabel_core::seed::derive_seed;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

/// Grid parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dataset: String,
    pub seed: u64,
    /// Stratified draw from the dataset; the demo pool comes out of it.
    pub sample_size: usize,
    pub demo_pool_size: usize,
    pub demos_per_class: Vec<usize>,
    pub strategies: Vec<DemoStrategy>,
    pub text_type: String,
    /// Everything except `demos_per_class` and `demo_strategy`, which the grid sets.
    pub annotator: AnnotatorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            seed: 0,
            sample_size: 125,
            demo_pool_size: 25,
            demos_per_class: (1..=5).collect(),
            strategies: DemoStrategy::ALL.to_vec(),
            text_type: "texts".into(),
            annotator: AnnotatorConfig::default(),
        }
    }
}

/// One grid cell, as written to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub seed: u64,
    pub demos_per_class: usize,
    pub strategy: DemoStrategy,
    pub samples: u64,
    pub consistent: u64,
    pub inconsistent: u64,
    pub inconsistency_rate: f64,
    /// Empty when no sample was consistent.
    pub accuracy_excl: Option<f64>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: Decimal,
    /// `ok`, `insufficient_demos` or `error: ...`.
    pub status: String,
}

impl EvalRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// The fixed split every cell uses.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub demo_pool: Vec<Demo>,
    pub targets: Vec<SampleId>,
}

/// Draws `sample_size` stratified samples, then `demo_pool_size` of those as
/// the demo pool; the rest are labeled.
pub fn eval_split(dataset: &Dataset, config: &EvalConfig) -> Result<EvalSplit> {
    anyhow::ensure!(
        config.demo_pool_size < config.sample_size,
        "demo pool ({}) must be smaller than the sample ({})",
        config.demo_pool_size,
        config.sample_size
    );
    let outer = stratified_sample(dataset, config.sample_size, derive_seed(config.seed, "eval-sample", 0))?;
    let inner = stratified_sample_ids(
        &outer.selected,
        |id| dataset.samples[id].gold_label.expect("stratified_sample checked gold"),
        dataset.num_classes(),
        config.demo_pool_size,
        derive_seed(config.seed, "eval-demos", 0),
    )?;
    let demo_pool = inner
        .selected
        .iter()
        .map(|&id| Demo {
            id,
            text: dataset.samples[id].text.clone(),
            label: dataset.samples[id].gold_label.expect("gold"),
        })
        .collect();
    Ok(EvalSplit {
        demo_pool,
        targets: inner.remainder,
    })
}

/// Runs every (demos per class, strategy) cell, calling `on_row` as each finishes.
pub fn run_grid(
    dataset: &Dataset,
    config: &EvalConfig,
    backend: &dyn ChatBackend,
    ledger: &mut Ledger,
    mut on_row: impl FnMut(&EvalRow) -> Result<()>,
) -> Result<Vec<EvalRow>> {
    let split = eval_split(dataset, config)?;
    let samples: Vec<(SampleId, &str)> = split
        .targets
        .iter()
        .map(|&id| (id, dataset.samples[id].text.as_str()))
        .collect();
    let meta = PromptMeta::new(config.text_type.clone(), dataset.class_names.clone());
    let mut rows = Vec::new();
    for &per_class in &config.demos_per_class {
        for &strategy in &config.strategies {
            let annotator_config = AnnotatorConfig {
                demos_per_class: per_class,
                demo_strategy: strategy,
                ..config.annotator.clone()
            };
            let annotator = LlmAnnotator::new(backend, annotator_config, meta.clone());
            let cell_seed = derive_seed(config.seed, strategy.as_str(), per_class as u64);
            let mut row = EvalRow {
                dataset: config.dataset.clone(),
                seed: config.seed,
                demos_per_class: per_class,
                strategy,
                samples: 0,
                consistent: 0,
                inconsistent: 0,
                inconsistency_rate: 0.0,
                accuracy_excl: None,
                prompt_tokens: 0,
                completion_tokens: 0,
                cost_usd: Decimal::ZERO,
                status: "ok".into(),
            };
            match annotator.annotate(&samples, &split.demo_pool, cell_seed) {
                Ok(batches) => {
                    let tags = LedgerTags::new(
                        format!("eval-{}-n{}-{}", config.dataset, per_class, strategy),
                        None,
                    );
                    for b in &batches {
                        row.cost_usd += ledger.record_llm(b.usage, &b.model, &tags)?;
                        row.prompt_tokens += b.usage.prompt_tokens;
                        row.completion_tokens += b.usage.completion_tokens;
                    }
                    let stats = quality(batches.iter().flat_map(|b| {
                        b.batch_ids
                            .iter()
                            .zip(&b.verdicts)
                            .map(|(&id, v)| (v, dataset.samples[id].gold_label.expect("gold")))
                    }));
                    row.samples = stats.total;
                    row.consistent = stats.consistent;
                    row.inconsistent = stats.inconsistent();
                    row.inconsistency_rate = stats.inconsistency_rate();
                    row.accuracy_excl = stats.accuracy_excl();
                }
                Err(AnnotatorError::InsufficientDemos { .. }) => {
                    row.status = "insufficient_demos".into();
                }
                Err(e) => {
                    tracing::error!(per_class, %strategy, error = %e, "grid cell failed");
                    row.status = format!("error: {e}");
                }
            }
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Writes rows progressively to a CSV file.
pub struct RowSink {
    writer: csv::Writer<std::fs::File>,
    pub path: PathBuf,
}

impl RowSink {
    pub fn create(path: &Path) -> Result<Self> {
        let writer =
            csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &EvalRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn render_table(rows: &[EvalRow]) -> String {
    let mut out = format!(
        "{:<4} {:<15} {:>7} {:>9} {:>9} {:>10}  {}\n",
        "N", "strategy", "samples", "inconsist", "acc_excl", "cost_usd", "status"
    );
    for r in rows {
        let acc = r
            .accuracy_excl
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<4} {:<15} {:>7} {:>9.3} {:>9} {:>10}  {}\n",
            r.demos_per_class,
            r.strategy.as_str(),
            r.samples,
            r.inconsistency_rate,
            acc,
            r.cost_usd.round_dp(4),
            r.status
        ));
    }
    out
}
