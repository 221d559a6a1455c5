//! LLM annotation: prompts, sampled completions, parsing and consistency votes.

mod client;
mod demos;
mod parse;
mod prompt;
mod vote;
pub mod wire;

pub use client::{ChatBackend, HttpChatClient, RetryPolicy, TransportError};
pub use demos::{select_demos, Demo, DemoStrategy};
pub use parse::{
    parse_label_slots, parse_labels, render_json, render_numbered, split_numbered, ParseFailure,
};
pub use prompt::{build_prompt, PromptBundle, PromptMeta};
pub use vote::{vote, Verdict, VotingRule};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassId, SampleId};
use crate::seed::derive_seed;
use wire::{ChatRequest, ResponseFormat, Usage};

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("chat endpoint failed: {0}")]
    Transport(#[from] TransportError),
    #[error("demo pool has {available} samples of class {class:?}, need {needed}")]
    InsufficientDemos {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid annotator arguments: {0}")]
    Argument(String),
}

/// Selection-time token estimate: `ceil(bytes / 4)`. Never used for billing.
pub fn estimate_tokens(text: &str) -> u64 {
    text.len().div_ceil(4) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub model: String,
    pub demos_per_class: usize,
    pub demo_strategy: DemoStrategy,
    /// Completions sampled per request.
    pub n: u32,
    pub temperature: f64,
    /// Sentences labeled per request.
    pub batch_size: usize,
    /// Requests in flight at once.
    pub parallelism: usize,
    pub voting: VotingRule,
    pub json_response_format: bool,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo-1106".into(),
            demos_per_class: 3,
            demo_strategy: DemoStrategy::MinToken,
            n: 3,
            temperature: 0.2,
            batch_size: 10,
            parallelism: 4,
            voting: VotingRule::Unanimous,
            json_response_format: true,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<(), AnnotatorError> {
        if self.n == 0 {
            return Err(AnnotatorError::Argument("n must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(AnnotatorError::Argument("temperature must be >= 0".into()));
        }
        if self.batch_size == 0 || self.parallelism == 0 {
            return Err(AnnotatorError::Argument(
                "batch_size and parallelism must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled completion after parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    /// Parallel to the batch; `None` where that item could not be read.
    pub labels: Vec<Option<ClassId>>,
    /// Set when the whole completion was unusable.
    pub failure: Option<ParseFailure>,
}

/// Result of one request: parsed completions, per-sample verdicts and billing usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchAnnotation {
    pub batch_ids: Vec<SampleId>,
    pub completions: Vec<CompletionResult>,
    pub verdicts: Vec<Verdict>,
    pub usage: Usage,
    pub model: String,
}

/// Sends one request for `n` completions and votes per sample.
pub fn annotate_batch(
    backend: &dyn ChatBackend,
    bundle: &PromptBundle,
    class_names: &[String],
    config: &AnnotatorConfig,
) -> Result<BatchAnnotation, AnnotatorError> {
    config.validate()?;
    let request = ChatRequest {
        model: config.model.clone(),
        messages: bundle.messages.clone(),
        n: config.n,
        temperature: config.temperature,
        response_format: config
            .json_response_format
            .then(ResponseFormat::json_object),
    };
    let response = backend.complete(&request)?;
    let b = bundle.batch_size();

    let mut completions: Vec<CompletionResult> = response
        .choices
        .iter()
        .take(config.n as usize)
        .map(|choice| {
            let content = choice.message.content.as_deref().unwrap_or("");
            match parse_label_slots(content, b, class_names) {
                Ok(labels) => CompletionResult {
                    labels,
                    failure: None,
                },
                Err(f) => CompletionResult {
                    labels: vec![None; b],
                    failure: Some(f),
                },
            }
        })
        .collect();
    // A short response counts its missing completions as failed parses.
    while completions.len() < config.n as usize {
        completions.push(CompletionResult {
            labels: vec![None; b],
            failure: Some(ParseFailure::Missing),
        });
    }

    let verdicts = (0..b)
        .map(|i| {
            let observed: Vec<Option<ClassId>> = completions.iter().map(|c| c.labels[i]).collect();
            vote(&observed, config.voting)
        })
        .collect();
    Ok(BatchAnnotation {
        batch_ids: bundle.batch_ids.clone(),
        completions,
        verdicts,
        usage: response.usage,
        model: config.model.clone(),
    })
}

/// Labels many samples by splitting them into prompt batches and sending those
/// concurrently.
pub struct LlmAnnotator<'a> {
    backend: &'a dyn ChatBackend,
    config: AnnotatorConfig,
    meta: PromptMeta,
}

impl<'a> LlmAnnotator<'a> {
    pub fn new(backend: &'a dyn ChatBackend, config: AnnotatorConfig, meta: PromptMeta) -> Self {
        Self {
            backend,
            config,
            meta,
        }
    }

    pub fn config(&self) -> &AnnotatorConfig {
        &self.config
    }

    pub fn meta(&self) -> &PromptMeta {
        &self.meta
    }

    /// Builds the prompt bundles for `samples`. Each batch draws its own demos;
    /// max_similarity compares against the batch's sentences joined together.
    pub fn prepare(
        &self,
        samples: &[(SampleId, &str)],
        demo_pool: &[Demo],
        seed: u64,
    ) -> Result<Vec<PromptBundle>, AnnotatorError> {
        self.config.validate()?;
        samples
            .chunks(self.config.batch_size)
            .enumerate()
            .map(|(b, batch)| {
                let target = (self.config.demo_strategy == DemoStrategy::MaxSimilarity).then(|| {
                    batch
                        .iter()
                        .map(|(_, t)| *t)
                        .collect::<Vec<_>>()
                        .join(" ")
                });
                let demos = select_demos(
                    demo_pool,
                    &self.meta.class_names,
                    self.config.demo_strategy,
                    self.config.demos_per_class,
                    target.as_deref(),
                    derive_seed(seed, "demos", b as u64),
                )?;
                Ok(build_prompt(
                    &self.meta,
                    &demos,
                    batch,
                    self.config.demos_per_class,
                ))
            })
            .collect()
    }

    /// Sends every bundle with at most `parallelism` requests in flight.
    /// Results come back in bundle order regardless of completion order.
    pub fn send_all(&self, bundles: &[PromptBundle]) -> Result<Vec<BatchAnnotation>, AnnotatorError> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<BatchAnnotation, AnnotatorError>>>> =
            Mutex::new((0..bundles.len()).map(|_| None).collect());
        let workers = self.config.parallelism.min(bundles.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= bundles.len() {
                        break;
                    }
                    let result = annotate_batch(
                        self.backend,
                        &bundles[i],
                        &self.meta.class_names,
                        &self.config,
                    );
                    let failed = result.is_err();
                    slots.lock().expect("annotation slots poisoned")[i] = Some(result);
                    if failed {
                        // stop handing out new work
                        next.store(bundles.len(), Ordering::Relaxed);
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(bundles.len());
        for slot in slots.into_inner().expect("annotation slots poisoned") {
            match slot {
                Some(r) => out.push(r?),
                None => break,
            }
        }
        Ok(out)
    }

    pub fn annotate(
        &self,
        samples: &[(SampleId, &str)],
        demo_pool: &[Demo],
        seed: u64,
    ) -> Result<Vec<BatchAnnotation>, AnnotatorError> {
        let bundles = self.prepare(samples, demo_pool, seed)?;
        self.send_all(&bundles)
    }
}
