use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use mixlabel_core::al::{run_al, Annotators, IterationRecord, RunConfig, RunObserver};
use mixlabel_core::annotator::wire::{
    ChatRequest, ChatResponse, Choice, ResponseMessage, Role, Usage,
};
use mixlabel_core::annotator::{render_json, split_numbered, ChatBackend, TransportError};
use mixlabel_core::classifier::{LogisticLearner, TrainConfig};
use mixlabel_core::corpus::{Dataset, LabelPool, LabelSource, SampleId, Split};
use mixlabel_core::ledger::{EntryKind, Ledger, PriceTable};
use mixlabel_core::query::QueryStrategy;
use mixlabel_core::router::{AnnotationMode, GoldOracle};
use mixlabel_core::synth::{movie_reviews, REVIEW_CLASSES};
use proptest::prelude::*;
use rust_decimal::Decimal;

/// Answers from a text→label table. Every `disagree_every`-th distinct sentence
/// gets a dissenting first completion.
struct TableBackend {
    labels: HashMap<String, usize>,
    names: Vec<String>,
    disagree_every: Option<usize>,
    fail_after: Option<usize>,
    calls: AtomicUsize,
}

impl TableBackend {
    fn new(train: &Dataset) -> Self {
        Self {
            labels: train
                .samples
                .iter()
                .map(|s| (s.text.clone(), s.gold_label.unwrap()))
                .collect(),
            names: train.class_names.clone(),
            disagree_every: None,
            fail_after: None,
            calls: AtomicUsize::new(0),
        }
    }

    fn dissents(&self, text: &str) -> bool {
        self.disagree_every
            .is_some_and(|k| text.len().is_multiple_of(k))
    }
}

impl ChatBackend for TableBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|n| call >= n) {
            return Err(TransportError::Fatal("quota exhausted".into()));
        }
        let batch = &request.messages.last().unwrap().content;
        let texts = split_numbered(batch).expect("numbered batch");
        let choices = (0..request.n)
            .map(|j| {
                let labels: Vec<&str> = texts
                    .iter()
                    .map(|t| {
                        let c = self.labels[*t];
                        let c = if j == 0 && self.dissents(t) { 1 - c } else { c };
                        self.names[c].as_str()
                    })
                    .collect();
                Choice {
                    index: j,
                    message: ResponseMessage {
                        role: Role::Assistant,
                        content: Some(render_json(&labels)),
                    },
                    finish_reason: Some("stop".into()),
                }
            })
            .collect();
        Ok(ChatResponse {
            id: format!("t{call}"),
            object: "chat.completion".into(),
            created: 0,
            model: request.model.clone(),
            choices,
            usage: Usage::new(100 + texts.len() as u64 * 20, request.n as u64 * 8),
        })
    }
}

fn splits() -> (Arc<Dataset>, Dataset) {
    let mut all = movie_reviews(500, 21);
    let test = all.split_off(400);
    let names: Vec<String> = REVIEW_CLASSES.map(String::from).to_vec();
    let build = |r: Vec<(String, usize)>, split| {
        Dataset::new(
            "reviews",
            names.clone(),
            r.into_iter().map(|(t, l)| (t, Some(l))).collect(),
            split,
        )
        .unwrap()
    };
    (Arc::new(build(all, Split::Train)), build(test, Split::Test))
}

fn config(mode: AnnotationMode, strategy: QueryStrategy, seed: u64) -> RunConfig {
    RunConfig {
        mode,
        strategy,
        seed,
        init_size: 10,
        iterations: 5,
        batch_k: 20,
        classifier: TrainConfig {
            max_epochs: 30,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

#[derive(Default)]
struct Tally {
    sizes: Vec<(usize, usize, usize)>,
    escalated: Vec<SampleId>,
}

impl RunObserver for Tally {
    fn on_iteration(&mut self, r: &IterationRecord, pool: &LabelPool, _: &Ledger) {
        self.sizes
            .push((r.iteration, pool.labeled_len(), pool.unlabeled_len()));
    }

    fn on_escalation(&mut self, _: usize, ids: &[SampleId]) {
        self.escalated.extend_from_slice(ids);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn pool_sizes_are_conserved(
        seed in any::<u64>(),
        mode in prop::sample::select(AnnotationMode::ALL.to_vec()),
        strategy in prop::sample::select(QueryStrategy::ALL.to_vec()),
        disagree in prop::option::of(2usize..7),
    ) {
        let (train, test) = splits();
        let mut backend = TableBackend::new(&train);
        backend.disagree_every = disagree;
        let mut ledger = Ledger::new(PriceTable::default());
        let mut tally = Tally::default();
        let cfg = config(mode, strategy, seed);
        let result = run_al(
            &cfg,
            &LogisticLearner::new(cfg.classifier.clone()),
            Arc::clone(&train),
            &test,
            Annotators { llm: Some(&backend), human: &GoldOracle },
            &mut ledger,
            &mut tally,
        ).unwrap();
        prop_assert_eq!(tally.sizes.len(), 6);
        for &(t, l, u) in &tally.sizes {
            prop_assert_eq!(l + u, train.len());
            prop_assert_eq!(l, 10 + 20 * t);
        }
        prop_assert_eq!(result.labels.len(), 110);
        prop_assert_eq!(ledger.total(), result.total_cost);
        let summed: Decimal = result.curve.iter().map(|r| r.iteration_cost).sum();
        prop_assert_eq!(summed, result.total_cost);
        let humans = result.labels.iter().filter(|l| l.2 == LabelSource::Human).count();
        match mode {
            AnnotationMode::HumanOnly => prop_assert_eq!(humans, 100),
            AnnotationMode::Mixed => prop_assert_eq!(humans, tally.escalated.len()),
        }
    }
}

#[test]
fn noiseless_llm_matches_human_only() {
    let (train, test) = splits();
    let backend = TableBackend::new(&train);
    let run = |mode| {
        let cfg = config(mode, QueryStrategy::BreakingTies, 5);
        run_al(
            &cfg,
            &LogisticLearner::new(cfg.classifier.clone()),
            Arc::clone(&train),
            &test,
            Annotators {
                llm: Some(&backend),
                human: &GoldOracle,
            },
            &mut Ledger::new(PriceTable::default()),
            &mut (),
        )
        .unwrap()
    };
    let mixed = run(AnnotationMode::Mixed);
    let human = run(AnnotationMode::HumanOnly);
    let strip = |r: &mixlabel_core::al::RunResult| -> Vec<(usize, usize)> {
        r.labels.iter().map(|&(i, l, _)| (i, l)).collect()
    };
    assert_eq!(strip(&mixed), strip(&human));
    assert_eq!(mixed.accuracies(), human.accuracies());
    assert!(mixed.total_cost < human.total_cost);
}

#[test]
fn escalations_are_charged_as_human_labels() {
    let (train, test) = splits();
    let mut backend = TableBackend::new(&train);
    backend.disagree_every = Some(3);
    let cfg = config(AnnotationMode::Mixed, QueryStrategy::Random, 1);
    let mut ledger = Ledger::new(PriceTable::default());
    let mut tally = Tally::default();
    let result = run_al(
        &cfg,
        &LogisticLearner::new(cfg.classifier.clone()),
        Arc::clone(&train),
        &test,
        Annotators {
            llm: Some(&backend),
            human: &GoldOracle,
        },
        &mut ledger,
        &mut tally,
    )
    .unwrap();
    let human_entries: Vec<_> = ledger
        .entries()
        .iter()
        .filter(|e| e.kind == EntryKind::HumanLabel)
        .collect();
    assert!(!tally.escalated.is_empty());
    assert_eq!(human_entries.len(), tally.escalated.len());
    for e in human_entries {
        let id = e.sample_id.unwrap();
        assert!(train.samples[id].text.len() % 3 == 0);
    }
    assert_eq!(
        result.annotation.inconsistent() as usize,
        tally.escalated.len()
    );
    ledger.verify(&PriceTable::default()).unwrap();
}

#[test]
fn transport_failure_returns_partial_curve() {
    let (train, test) = splits();
    let mut backend = TableBackend::new(&train);
    backend.fail_after = Some(4);
    let cfg = config(AnnotationMode::Mixed, QueryStrategy::LeastConfidence, 2);
    let mut ledger = Ledger::new(PriceTable::default());
    let failure = run_al(
        &cfg,
        &LogisticLearner::new(cfg.classifier.clone()),
        Arc::clone(&train),
        &test,
        Annotators {
            llm: Some(&backend),
            human: &GoldOracle,
        },
        &mut ledger,
        &mut (),
    )
    .unwrap_err();
    assert!(!failure.partial.completed);
    // batches of 10 → two requests per iteration; the third iteration fails
    assert_eq!(failure.partial.curve.len(), 3);
    assert_eq!(failure.partial.labels.len(), 50);
    assert!(failure.to_string().contains("quota exhausted"));
}
