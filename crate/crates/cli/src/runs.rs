//! Seeded AL runs over a grid of modes and query strategies.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use mixlabel_core::al::{
    aggregate_runs, run_al, Aggregate, Annotators, IterationRecord, RunConfig, RunObserver,
    RunResult,
};
use mixlabel_core::annotator::ChatBackend;
use mixlabel_core::classifier::LogisticLearner;
use mixlabel_core::corpus::{Dataset, LabelPool, SampleId};
use mixlabel_core::ledger::{round_cents, Ledger, PriceTable};
use mixlabel_core::query::QueryStrategy;
use mixlabel_core::router::{AnnotationMode, HumanAnnotator};

use crate::manifest::{
    JsonlWriter, Manifest, ITERATIONS_FILE, LEDGER_FILE, PARTIAL_FILE, RESULT_FILE,
};
use crate::setup::{write_json, EndpointDescription, InputFile};

/// Logs progress and, with a run directory, appends each curve point to disk.
struct Progress<'a> {
    sink: Option<JsonlWriter>,
    inner: &'a mut dyn RunObserver,
    error: Option<anyhow::Error>,
}

impl RunObserver for Progress<'_> {
    fn on_iteration(&mut self, record: &IterationRecord, pool: &LabelPool, ledger: &Ledger) {
        tracing::info!(
            iteration = record.iteration,
            labeled = record.labeled,
            accuracy = format!("{:.4}", record.test_accuracy),
            cost = %round_cents(record.cumulative_cost),
            "iteration done"
        );
        if let Some(sink) = &mut self.sink {
            if let Err(e) = sink.write(record) {
                self.error.get_or_insert(e);
            }
        }
        self.inner.on_iteration(record, pool, ledger);
    }

    fn on_escalation(&mut self, iteration: usize, ids: &[SampleId]) {
        if !ids.is_empty() {
            tracing::info!(iteration, count = ids.len(), "escalating to human");
        }
        self.inner.on_escalation(iteration, ids);
    }
}

/// One run. With `dir`, writes the ledger journal, per-iteration records and
/// the final (or partial) result there.
#[allow(clippy::too_many_arguments)]
pub fn run_one(
    config: &RunConfig,
    train: Arc<Dataset>,
    test: &Dataset,
    llm: Option<&dyn ChatBackend>,
    human: &dyn HumanAnnotator,
    prices: &PriceTable,
    dir: Option<&Path>,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    let mut ledger = Ledger::new(prices.clone());
    let mut sink = None;
    if let Some(d) = dir {
        // a rerun into the same directory starts a fresh journal
        for stale in [LEDGER_FILE, RESULT_FILE, PARTIAL_FILE] {
            let _ = std::fs::remove_file(d.join(stale));
        }
        ledger = ledger.with_journal(&d.join(LEDGER_FILE))?;
        sink = Some(JsonlWriter::create(&d.join(ITERATIONS_FILE))?);
    }
    let mut progress = Progress {
        sink,
        inner: observer,
        error: None,
    };
    let learner = LogisticLearner::new(config.classifier.clone());
    let annotators = Annotators { llm, human };
    let outcome = run_al(config, &learner, train, test, annotators, &mut ledger, &mut progress);
    if let Some(e) = progress.error {
        return Err(e.context("writing iteration records"));
    }
    match outcome {
        Ok(result) => {
            ledger.verify(prices)?;
            if let Some(d) = dir {
                write_json(&d.join(RESULT_FILE), &result)?;
            }
            Ok(result)
        }
        Err(failure) => {
            if let Some(d) = dir {
                write_json(&d.join(PARTIAL_FILE), &failure.partial)?;
            }
            Err(anyhow::Error::new(failure))
        }
    }
}

/// The cross product to run.
#[derive(Debug, Clone)]
pub struct RunGrid {
    pub base: RunConfig,
    pub modes: Vec<AnnotationMode>,
    pub strategies: Vec<QueryStrategy>,
    pub seeds: Vec<u64>,
}

impl RunGrid {
    pub fn configs(&self) -> Vec<Vec<RunConfig>> {
        let mut groups = Vec::new();
        for &mode in &self.modes {
            for &strategy in &self.strategies {
                groups.push(
                    self.seeds
                        .iter()
                        .map(|&seed| RunConfig {
                            mode,
                            strategy,
                            seed,
                            ..self.base.clone()
                        })
                        .collect(),
                );
            }
        }
        groups
    }
}

/// Where run artifacts go and what the manifests record.
pub struct Provenance {
    pub out: PathBuf,
    pub inputs: Vec<InputFile>,
    pub endpoint: EndpointDescription,
}

/// Runs every grid cell and aggregates each over its seeds.
pub fn run_grid(
    grid: &RunGrid,
    train: Arc<Dataset>,
    test: &Dataset,
    llm: Option<&dyn ChatBackend>,
    human: &dyn HumanAnnotator,
    prices: &PriceTable,
    provenance: Option<&Provenance>,
) -> Result<Vec<(Aggregate, Vec<RunResult>)>> {
    let mut out = Vec::new();
    for group in grid.configs() {
        let mut results = Vec::with_capacity(group.len());
        for config in &group {
            tracing::info!(run = %config.run_id(), "starting run");
            let dir = match provenance {
                Some(p) => Some(
                    Manifest::new(
                        "al-run",
                        config,
                        p.inputs.clone(),
                        p.endpoint.clone(),
                        config.seed,
                    )?
                    .create_dir(&p.out)?,
                ),
                None => None,
            };
            let result = run_one(
                config,
                Arc::clone(&train),
                test,
                llm,
                human,
                prices,
                dir.as_deref(),
                &mut (),
            )
            .with_context(|| format!("run {}", config.run_id()))?;
            results.push(result);
        }
        out.push((aggregate_runs(&results)?, results));
    }
    Ok(out)
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "dataset",
    "mode",
    "strategy",
    "runs",
    "final_accuracy_mean",
    "final_accuracy_sd",
    "auc_mean",
    "auc_sd",
    "mean_cost_usd",
    "seeds",
];

pub fn write_summary_csv<W: Write>(out: W, aggregates: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for a in aggregates {
        let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
        w.write_record([
            a.dataset.clone(),
            a.mode.to_string(),
            a.strategy.as_str().to_string(),
            a.seeds.len().to_string(),
            format!("{:.6}", a.final_accuracy.mean),
            format!("{:.6}", a.final_accuracy.sd),
            format!("{:.6}", a.auc.mean),
            format!("{:.6}", a.auc.sd),
            a.mean_total_cost.to_string(),
            seeds.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy and AUC as mean ± sd, cost in cents.
pub fn render_summary(aggregates: &[Aggregate]) -> String {
    let mut out = format!(
        "{:<16} {:<6} {:<4} {:>17} {:>17} {:>10}\n",
        "dataset", "mode", "qs", "final acc", "AUC", "cost ($)"
    );
    for a in aggregates {
        out.push_str(&format!(
            "{:<16} {:<6} {:<4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>10}\n",
            a.dataset,
            a.mode.as_str(),
            a.strategy.abbreviation(),
            a.final_accuracy.mean,
            a.final_accuracy.sd,
            a.auc.mean,
            a.auc.sd,
            round_cents(a.mean_total_cost),
        ));
    }
    out
}
