//! Re-reads run directories: checks ledgers against results and re-aggregates.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixlabel_core::al::{aggregate_runs, Aggregate, RunResult};
use mixlabel_core::ledger::{round_cents, verify_entries, Ledger, LedgerSummary, PriceTable};
use rust_decimal::Decimal;

use crate::manifest::{LEDGER_FILE, RESULT_FILE};

/// A completed run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub result: RunResult,
    pub ledger: Option<LedgerSummary>,
}

/// Directories under `root` (inclusive) that hold a `result.json`, sorted.
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(RESULT_FILE).is_file() {
            out.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                stack.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a run and, when its ledger journal is present, checks every entry's
/// cost and that the entries sum to the result's total.
pub fn load_run(dir: &Path, prices: &PriceTable) -> Result<LoadedRun> {
    let path = dir.join(RESULT_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let result: RunResult =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let ledger_path = dir.join(LEDGER_FILE);
    let ledger = if ledger_path.is_file() {
        let entries = Ledger::load_entries(&ledger_path)?;
        verify_entries(&entries, prices)
            .with_context(|| format!("verifying {}", ledger_path.display()))?;
        let total: Decimal = entries.iter().map(|e| e.cost_usd).sum();
        if total != result.total_cost {
            bail!(
                "{}: ledger total {} differs from result total {}",
                dir.display(),
                total,
                result.total_cost
            );
        }
        Some(LedgerSummary::from_entries(&entries))
    } else {
        None
    };
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        result,
        ledger,
    })
}

/// Groups runs whose configurations differ only in seed and aggregates each group.
pub fn group_and_aggregate(runs: &[LoadedRun]) -> Result<Vec<Aggregate>> {
    let mut groups: Vec<Vec<RunResult>> = Vec::new();
    for run in runs {
        let key = run.result.config.without_seed();
        match groups.iter_mut().find(|g| g[0].config.without_seed() == key) {
            Some(g) => g.push(run.result.clone()),
            None => groups.push(vec![run.result.clone()]),
        }
    }
    let mut out = groups
        .iter()
        .map(|g| Ok(aggregate_runs(g)?))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        (&a.dataset, a.mode.as_str(), a.strategy.as_str())
            .cmp(&(&b.dataset, b.mode.as_str(), b.strategy.as_str()))
    });
    Ok(out)
}

pub fn render_runs(runs: &[LoadedRun]) -> String {
    let mut out = format!(
        "{:<36} {:>6} {:>9} {:>9} {:>10} {:>9}\n",
        "run", "points", "final", "AUC", "cost ($)", "escalated"
    );
    for r in runs {
        let escalated: usize = r.result.curve.iter().map(|c| c.escalations).sum();
        out.push_str(&format!(
            "{:<36} {:>6} {:>9.4} {:>9.4} {:>10} {:>9}\n",
            r.result.run_id,
            r.result.curve.len(),
            r.result.final_accuracy,
            r.result.auc.value,
            round_cents(r.result.total_cost),
            escalated
        ));
    }
    out
}
