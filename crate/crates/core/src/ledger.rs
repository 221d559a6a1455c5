//! Cost and annotation-quality accounting.
//!
//! All money is `rust_decimal::Decimal`; nothing here touches binary floating
//! point until a rate or accuracy is reported.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::wire::Usage;
use crate::annotator::Verdict;
use crate::corpus::{ClassId, SampleId};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("no price configured for model {0:?}")]
    UnknownModel(String),
    #[error("entry {seq}: recorded cost {recorded} but prices give {recomputed}")]
    Mismatch {
        seq: u64,
        recorded: Decimal,
        recomputed: Decimal,
    },
    #[error("ledger journal line {line}: {source}")]
    Journal {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// USD per 1000 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_1k: Decimal,
    pub output_per_1k: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
    /// USD per 50 human-labeled tokens.
    #[serde(default = "default_human_rate")]
    pub human_per_50_tokens: Decimal,
}

fn default_human_rate() -> Decimal {
    Decimal::new(11, 2)
}

impl Default for PriceTable {
    fn default() -> Self {
        let mut models = BTreeMap::new();
        models.insert(
            "gpt-3.5-turbo-1106".to_string(),
            ModelPrice {
                input_per_1k: Decimal::new(10, 4),
                output_per_1k: Decimal::new(20, 4),
            },
        );
        models.insert(
            "gpt-4-1106-preview".to_string(),
            ModelPrice {
                input_per_1k: Decimal::new(100, 4),
                output_per_1k: Decimal::new(300, 4),
            },
        );
        Self {
            models,
            human_per_50_tokens: default_human_rate(),
        }
    }
}

impl PriceTable {
    pub fn price(&self, model: &str) -> Result<&ModelPrice, LedgerError> {
        self.models
            .get(model)
            .ok_or_else(|| LedgerError::UnknownModel(model.to_string()))
    }

    pub fn llm_cost(&self, usage: Usage, model: &str) -> Result<Decimal, LedgerError> {
        let p = self.price(model)?;
        let thousand = Decimal::from(1000);
        Ok(Decimal::from(usage.prompt_tokens) * p.input_per_1k / thousand
            + Decimal::from(usage.completion_tokens) * p.output_per_1k / thousand)
    }

    pub fn human_cost(&self, token_basis: u64) -> Decimal {
        Decimal::from(token_basis) * self.human_per_50_tokens / Decimal::from(50)
    }
}

/// Cost of one chat call under `prices`.
pub fn llm_cost(usage: Usage, model: &str, prices: &PriceTable) -> Result<Decimal, LedgerError> {
    prices.llm_cost(usage, model)
}

/// Human labeling cost at $0.11 per 50 tokens, accrued proportionally.
pub fn human_cost(token_basis: u64) -> Decimal {
    PriceTable::default().human_cost(token_basis)
}

/// Rounds to cents, half to even. Only for display.
pub fn round_cents(amount: Decimal) -> Decimal {
    amount.round_dp_with_strategy(2, RoundingStrategy::MidpointNearestEven)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    LlmCall,
    HumanLabel,
}

pub const HUMAN_MODEL: &str = "human";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub kind: EntryKind,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Estimated tokens of the human-labeled text; 0 for LLM calls.
    pub token_basis: u64,
    pub cost_usd: Decimal,
    pub run: String,
    pub iteration: Option<u32>,
    pub sample_id: Option<SampleId>,
}

impl LedgerEntry {
    pub fn recompute(&self, prices: &PriceTable) -> Result<Decimal, LedgerError> {
        match self.kind {
            EntryKind::LlmCall => prices.llm_cost(
                Usage::new(self.prompt_tokens, self.completion_tokens),
                &self.model,
            ),
            EntryKind::HumanLabel => Ok(prices.human_cost(self.token_basis)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTags {
    pub run: String,
    pub iteration: Option<u32>,
}

impl LedgerTags {
    pub fn new(run: impl Into<String>, iteration: Option<u32>) -> Self {
        Self {
            run: run.into(),
            iteration,
        }
    }
}

/// Append-only cost log, optionally mirrored to a jsonl journal.
#[derive(Debug)]
pub struct Ledger {
    prices: PriceTable,
    entries: Vec<LedgerEntry>,
    journal: Option<BufWriter<File>>,
}

impl Ledger {
    pub fn new(prices: PriceTable) -> Self {
        Self {
            prices,
            entries: Vec::new(),
            journal: None,
        }
    }

    /// Appends every new entry to `path` as it is recorded.
    pub fn with_journal(mut self, path: &Path) -> Result<Self, LedgerError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.journal = Some(BufWriter::new(file));
        Ok(self)
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    fn push(&mut self, entry: LedgerEntry) -> Result<Decimal, LedgerError> {
        if let Some(j) = &mut self.journal {
            serde_json::to_writer(&mut *j, &entry).map_err(std::io::Error::from)?;
            j.write_all(b"\n")?;
            j.flush()?;
        }
        let cost = entry.cost_usd;
        self.entries.push(entry);
        Ok(cost)
    }

    pub fn record_llm(
        &mut self,
        usage: Usage,
        model: &str,
        tags: &LedgerTags,
    ) -> Result<Decimal, LedgerError> {
        let cost = self.prices.llm_cost(usage, model)?;
        let entry = LedgerEntry {
            seq: self.entries.len() as u64,
            kind: EntryKind::LlmCall,
            model: model.to_string(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            token_basis: 0,
            cost_usd: cost,
            run: tags.run.clone(),
            iteration: tags.iteration,
            sample_id: None,
        };
        self.push(entry)
    }

    pub fn record_human(
        &mut self,
        token_basis: u64,
        sample_id: Option<SampleId>,
        tags: &LedgerTags,
    ) -> Result<Decimal, LedgerError> {
        let entry = LedgerEntry {
            seq: self.entries.len() as u64,
            kind: EntryKind::HumanLabel,
            model: HUMAN_MODEL.to_string(),
            prompt_tokens: 0,
            completion_tokens: 0,
            token_basis,
            cost_usd: self.prices.human_cost(token_basis),
            run: tags.run.clone(),
            iteration: tags.iteration,
            sample_id,
        };
        self.push(entry)
    }

    pub fn total(&self) -> Decimal {
        self.entries.iter().map(|e| e.cost_usd).sum()
    }

    pub fn total_of(&self, kind: EntryKind) -> Decimal {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.cost_usd)
            .sum()
    }

    /// Checks every entry's cost against `prices`.
    pub fn verify(&self, prices: &PriceTable) -> Result<(), LedgerError> {
        verify_entries(&self.entries, prices)
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary::from_entries(&self.entries)
    }

    /// Reads a jsonl journal written by [`with_journal`](Self::with_journal).
    pub fn load_entries(path: &Path) -> Result<Vec<LedgerEntry>, LedgerError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|source| LedgerError::Journal { line: i + 1, source })?,
            );
        }
        Ok(out)
    }
}

pub fn verify_entries(entries: &[LedgerEntry], prices: &PriceTable) -> Result<(), LedgerError> {
    for e in entries {
        let recomputed = e.recompute(prices)?;
        if recomputed != e.cost_usd {
            return Err(LedgerError::Mismatch {
                seq: e.seq,
                recorded: e.cost_usd,
                recomputed,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLine {
    pub entries: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub token_basis: u64,
    pub cost_usd: Decimal,
}

impl CostLine {
    fn add(&mut self, e: &LedgerEntry) {
        self.entries += 1;
        self.prompt_tokens += e.prompt_tokens;
        self.completion_tokens += e.completion_tokens;
        self.token_basis += e.token_basis;
        self.cost_usd += e.cost_usd;
    }
}

/// Totals by kind, by model and by iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub total: CostLine,
    pub by_kind: BTreeMap<EntryKind, CostLine>,
    pub by_model: BTreeMap<String, CostLine>,
    /// Keyed by iteration; entries without one are filed under `None`.
    pub by_iteration: BTreeMap<Option<u32>, CostLine>,
}

impl LedgerSummary {
    pub fn from_entries(entries: &[LedgerEntry]) -> Self {
        let mut s = LedgerSummary::default();
        for e in entries {
            s.total.add(e);
            s.by_kind.entry(e.kind).or_default().add(e);
            s.by_model.entry(e.model.clone()).or_default().add(e);
            s.by_iteration.entry(e.iteration).or_default().add(e);
        }
        s
    }

    /// Plain-text report with cent-rounded amounts.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let line = |name: &str, c: &CostLine| {
            format!(
                "{name:<24} {:>8} {:>12} {:>12} {:>12} {:>12}\n",
                c.entries,
                c.prompt_tokens,
                c.completion_tokens,
                c.token_basis,
                format!("${}", round_cents(c.cost_usd))
            )
        };
        out.push_str(&format!(
            "{:<24} {:>8} {:>12} {:>12} {:>12} {:>12}\n",
            "group", "entries", "prompt_tok", "complet_tok", "human_tok", "cost"
        ));
        for (k, c) in &self.by_kind {
            let name = match k {
                EntryKind::LlmCall => "kind=llm_call",
                EntryKind::HumanLabel => "kind=human_label",
            };
            out.push_str(&line(name, c));
        }
        for (m, c) in &self.by_model {
            out.push_str(&line(&format!("model={m}"), c));
        }
        for (i, c) in &self.by_iteration {
            let name = match i {
                Some(i) => format!("iteration={i}"),
                None => "iteration=-".to_string(),
            };
            out.push_str(&line(&name, c));
        }
        out.push_str(&line("total", &self.total));
        out
    }

    /// CSV rows `group,key,entries,prompt_tokens,completion_tokens,token_basis,cost_usd`
    /// with exact (unrounded) costs.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LedgerError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "group",
            "key",
            "entries",
            "prompt_tokens",
            "completion_tokens",
            "token_basis",
            "cost_usd",
        ])?;
        let mut row = |group: &str, key: String, c: &CostLine| {
            w.write_record([
                group.to_string(),
                key,
                c.entries.to_string(),
                c.prompt_tokens.to_string(),
                c.completion_tokens.to_string(),
                c.token_basis.to_string(),
                c.cost_usd.to_string(),
            ])
        };
        for (k, c) in &self.by_kind {
            let key = serde_json::to_value(k)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            row("kind", key, c)?;
        }
        for (m, c) in &self.by_model {
            row("model", m.clone(), c)?;
        }
        for (i, c) in &self.by_iteration {
            row("iteration", i.map(|i| i.to_string()).unwrap_or_default(), c)?;
        }
        row("total", String::new(), &self.total)?;
        w.flush()?;
        Ok(())
    }
}

/// Annotation quality over verdicted samples with known gold labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityStats {
    pub total: u64,
    pub consistent: u64,
    pub consistent_correct: u64,
}

impl QualityStats {
    pub fn add(&mut self, verdict: &Verdict, gold: ClassId) {
        self.total += 1;
        if let Verdict::Consistent(label) = verdict {
            self.consistent += 1;
            if *label == gold {
                self.consistent_correct += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &QualityStats) {
        self.total += other.total;
        self.consistent += other.consistent;
        self.consistent_correct += other.consistent_correct;
    }

    pub fn inconsistent(&self) -> u64 {
        self.total - self.consistent
    }

    /// Fraction of samples that needed a human; 0 when nothing was annotated.
    pub fn inconsistency_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.inconsistent() as f64 / self.total as f64
        }
    }

    /// Accuracy over consistent samples only; undefined when there are none.
    pub fn accuracy_excl(&self) -> Option<f64> {
        (self.consistent > 0).then(|| self.consistent_correct as f64 / self.consistent as f64)
    }
}

/// Tallies verdicts against gold labels.
pub fn quality<'a>(pairs: impl IntoIterator<Item = (&'a Verdict, ClassId)>) -> QualityStats {
    let mut stats = QualityStats::default();
    for (v, gold) in pairs {
        stats.add(v, gold);
    }
    stats
}
