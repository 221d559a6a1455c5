//! A chat-completions stand-in that labels from gold with tunable noise.
//!
//! Every sample's fate is drawn from its own generator seeded by
//! `hash(seed, text)`, so batch composition and request order never change
//! which samples are flipped or made inconsistent.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mixlabel_core::annotator::wire::{
    ChatRequest, ChatResponse, Choice, ResponseMessage, Role, Usage,
};
use mixlabel_core::annotator::{
    estimate_tokens, render_json, render_numbered, split_numbered, ChatBackend, TransportError,
};
use mixlabel_core::classifier::stable_hash;
use mixlabel_core::corpus::{ClassId, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Label emitted for sentences the gold source does not know.
pub const UNKNOWN_LABEL: &str = "UNKNOWN";

const MAX_N: u32 = 128;

#[derive(Debug, Error, PartialEq)]
pub enum StubError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("invalid stub configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyFormat {
    /// `1. Positive; 2. Negative;`
    #[default]
    Numbered,
    /// `{"1": "Positive", "2": "Negative"}`
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub seed: u64,
    /// Chance a sample's agreed label is replaced by a random wrong class.
    pub error_rate: f64,
    /// Chance one of the n completions deviates for a sample.
    pub inconsistency_rate: f64,
    pub latency_ms: Option<u64>,
    pub reply_format: ReplyFormat,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            error_rate: 0.0,
            inconsistency_rate: 0.0,
            latency_ms: None,
            reply_format: ReplyFormat::Numbered,
        }
    }
}

impl StubConfig {
    pub fn validate(&self) -> Result<(), StubError> {
        for (name, v) in [
            ("error_rate", self.error_rate),
            ("inconsistency_rate", self.inconsistency_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(StubError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn latency(&self) -> Option<Duration> {
        self.latency_ms.map(Duration::from_millis)
    }
}

/// Gold labels keyed by trimmed sentence text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldSource {
    class_names: Vec<String>,
    labels: HashMap<String, ClassId>,
}

impl GoldSource {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            labels: HashMap::new(),
        }
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut g = Self::new(dataset.class_names.clone());
        g.extend(dataset).expect("same class list");
        g
    }

    /// Adds every gold-labeled sample; the first label seen for a text wins.
    pub fn extend(&mut self, dataset: &Dataset) -> Result<(), StubError> {
        if dataset.class_names != self.class_names {
            return Err(StubError::Config(format!(
                "dataset {:?} has classes {:?}, expected {:?}",
                dataset.name, dataset.class_names, self.class_names
            )));
        }
        for s in &dataset.samples {
            if let Some(gold) = s.gold_label {
                self.labels.entry(s.text.trim().to_string()).or_insert(gold);
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, text: &str, label: ClassId) {
        self.labels.insert(text.trim().to_string(), label);
    }

    pub fn lookup(&self, text: &str) -> Option<ClassId> {
        self.labels.get(text.trim()).copied()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// What the stub decided for one sentence, before rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFate {
    pub gold: Option<ClassId>,
    /// Label all agreeing completions give.
    pub agreed: Option<ClassId>,
    /// `(completion index, label)` of the one deviating completion.
    pub deviation: Option<(usize, ClassId)>,
}

/// Uniform draw from the classes other than `exclude`.
fn other_class(rng: &mut ChaCha8Rng, num_classes: usize, exclude: ClassId) -> ClassId {
    let r = rng.random_range(0..num_classes - 1);
    if r >= exclude {
        r + 1
    } else {
        r
    }
}

#[derive(Debug, Clone)]
pub struct Stub {
    config: StubConfig,
    gold: GoldSource,
}

impl Stub {
    pub fn new(config: StubConfig, gold: GoldSource) -> Result<Self, StubError> {
        config.validate()?;
        if gold.class_names.is_empty() {
            return Err(StubError::Config("gold source has no classes".into()));
        }
        Ok(Self { config, gold })
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    pub fn gold(&self) -> &GoldSource {
        &self.gold
    }

    fn sample_seed(&self, text: &str) -> u64 {
        let mut buf = self.config.seed.to_le_bytes().to_vec();
        buf.extend_from_slice(text.trim().as_bytes());
        stable_hash(&buf)
    }

    /// The deterministic outcome for `text` when `n` completions are requested.
    pub fn fate(&self, text: &str, n: usize) -> SampleFate {
        let c = self.gold.class_names.len();
        let Some(gold) = self.gold.lookup(text) else {
            return SampleFate {
                gold: None,
                agreed: None,
                deviation: None,
            };
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed(text));
        let flip = rng.random::<f64>() < self.config.error_rate;
        let wrong = if c > 1 { other_class(&mut rng, c, gold) } else { gold };
        let agreed = if flip { wrong } else { gold };
        let deviate = rng.random::<f64>() < self.config.inconsistency_rate;
        let deviation = (deviate && c > 1 && n > 0).then(|| {
            let at = rng.random_range(0..n);
            (at, other_class(&mut rng, c, agreed))
        });
        SampleFate {
            gold: Some(gold),
            agreed: Some(agreed),
            deviation,
        }
    }

    /// Answers a chat request. Pure in `(config, request)`.
    pub fn respond(&self, request: &ChatRequest) -> Result<ChatResponse, StubError> {
        if request.n == 0 || request.n > MAX_N {
            return Err(StubError::Malformed(format!(
                "n must be between 1 and {MAX_N}, got {}",
                request.n
            )));
        }
        let batch = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| StubError::Malformed("no user message".into()))?;
        let sentences = split_numbered(&batch.content).ok_or_else(|| {
            StubError::Malformed("last user message is not a numbered list".into())
        })?;
        let n = request.n as usize;
        let fates: Vec<SampleFate> = sentences.iter().map(|s| self.fate(s, n)).collect();

        let name = |c: Option<ClassId>| match c {
            Some(c) => self.gold.class_names[c].as_str(),
            None => UNKNOWN_LABEL,
        };
        let contents: Vec<String> = (0..n)
            .map(|j| {
                let labels: Vec<&str> = fates
                    .iter()
                    .map(|f| match f.deviation {
                        Some((at, label)) if at == j => name(Some(label)),
                        _ => name(f.agreed),
                    })
                    .collect();
                match self.config.reply_format {
                    ReplyFormat::Numbered => render_numbered(&labels),
                    ReplyFormat::Json => render_json(&labels),
                }
            })
            .collect();

        let prompt_tokens = request
            .messages
            .iter()
            .map(|m| estimate_tokens(&m.content))
            .sum();
        let completion_tokens = contents.iter().map(|c| estimate_tokens(c)).sum();
        let request_bytes = serde_json::to_vec(request).expect("request serializes");
        let mut id_key = self.config.seed.to_le_bytes().to_vec();
        id_key.extend_from_slice(&request_bytes);
        Ok(ChatResponse {
            id: format!("stub-{:016x}", stable_hash(&id_key)),
            object: "chat.completion".into(),
            created: 0,
            model: request.model.clone(),
            choices: contents
                .into_iter()
                .enumerate()
                .map(|(i, content)| Choice {
                    index: i as u32,
                    message: ResponseMessage {
                        role: Role::Assistant,
                        content: Some(content),
                    },
                    finish_reason: Some("stop".into()),
                })
                .collect(),
            usage: Usage::new(prompt_tokens, completion_tokens),
        })
    }
}

/// In-process backend: same answers as the server, no sockets.
#[derive(Debug, Clone)]
pub struct StubBackend {
    stub: Arc<Stub>,
}

impl StubBackend {
    pub fn new(stub: Stub) -> Self {
        Self {
            stub: Arc::new(stub),
        }
    }

    pub fn stub(&self) -> &Stub {
        &self.stub
    }
}

impl ChatBackend for StubBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        if let Some(d) = self.stub.config.latency() {
            std::thread::sleep(d);
        }
        self.stub
            .respond(request)
            .map_err(|e| TransportError::Fatal(e.to_string()))
    }
}

fn error_body(status: StatusCode, message: String) -> Response {
    (
        status,
        Json(json!({"error": {"message": message, "type": "invalid_request_error"}})),
    )
        .into_response()
}

async fn completions(
    State(stub): State<Arc<Stub>>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(rejection) => return error_body(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    if let Some(d) = stub.config.latency() {
        tokio::time::sleep(d).await;
    }
    match stub.respond(&request) {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => error_body(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

/// Routes: `POST /v1/chat/completions` (also without the `/v1` prefix) and
/// `GET /health`.
pub fn router(stub: Arc<Stub>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(completions))
        .route("/chat/completions", post(completions))
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .with_state(stub)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    stub: Arc<Stub>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(stub))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own runtime thread; stops when dropped.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    pub fn start(stub: Stub, bind: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let stub = Arc::new(stub);
        let thread = std::thread::spawn(move || {
            runtime.block_on(serve(listener, stub, async {
                let _ = rx.await;
            }))
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn completions_url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
