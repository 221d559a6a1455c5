//! Live-human mode: an AL run on a worker thread whose escalations wait in a
//! queue that annotators drain over HTTP.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mixlabel_core::al::{IterationRecord, RunConfig, RunObserver};
use mixlabel_core::annotator::ChatBackend;
use mixlabel_core::corpus::{Dataset, LabelPool, SampleId};
use mixlabel_core::ledger::{Ledger, LedgerSummary, PriceTable, QualityStats};
use mixlabel_core::router::{HumanQueue, HumanTask, QueueAnnotator, RouterError};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::runs::run_one;

/// Version tag carried by every response body.
pub const API_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Starting,
    Running,
    /// Blocked until the pending queue is labeled.
    AwaitingHuman,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub labeled: usize,
    pub test_accuracy: f64,
    pub cumulative_cost: Decimal,
    pub escalations: usize,
}

#[derive(Debug, Clone)]
struct Snapshot {
    state: RunState,
    iteration: Option<usize>,
    labeled: usize,
    unlabeled: usize,
    curve: Vec<CurvePoint>,
    annotation: QualityStats,
    ledger: LedgerSummary,
    error: Option<String>,
}

/// Shared between the HTTP handlers and the run thread.
pub struct ServiceState {
    run_id: String,
    iterations: usize,
    queue: Arc<HumanQueue>,
    snapshot: Mutex<Snapshot>,
    finished: watch::Sender<bool>,
}

impl ServiceState {
    pub fn new(config: &RunConfig, queue: Arc<HumanQueue>, train_size: usize) -> Arc<Self> {
        Arc::new(Self {
            run_id: config.run_id(),
            iterations: config.iterations,
            queue,
            snapshot: Mutex::new(Snapshot {
                state: RunState::Starting,
                iteration: None,
                labeled: 0,
                unlabeled: train_size,
                curve: Vec::new(),
                annotation: QualityStats::default(),
                ledger: LedgerSummary::default(),
                error: None,
            }),
            finished: watch::channel(false).0,
        })
    }

    pub fn queue(&self) -> &Arc<HumanQueue> {
        &self.queue
    }

    fn snapshot(&self) -> std::sync::MutexGuard<'_, Snapshot> {
        self.snapshot.lock().expect("service snapshot poisoned")
    }

    pub fn status(&self) -> StatusBody {
        let snap = self.snapshot();
        let pending = self.queue.pending_len();
        let state = match snap.state {
            RunState::Running if pending > 0 => RunState::AwaitingHuman,
            s => s,
        };
        StatusBody {
            api_version: API_VERSION.into(),
            run_id: self.run_id.clone(),
            state,
            iteration: snap.iteration,
            iterations: self.iterations,
            labeled: snap.labeled,
            unlabeled: snap.unlabeled,
            latest_accuracy: snap.curve.last().map(|c| c.test_accuracy),
            cumulative_cost: snap.ledger.total.cost_usd,
            pending,
            error: snap.error.clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        *self.finished.borrow()
    }

    /// Resolves once the run has completed or failed.
    pub async fn wait_finished(&self) {
        let mut rx = self.finished.subscribe();
        let _ = rx.wait_for(|done| *done).await;
    }

    fn finish(&self, error: Option<String>) {
        {
            let mut snap = self.snapshot();
            snap.state = if error.is_some() {
                RunState::Failed
            } else {
                RunState::Completed
            };
            snap.error = error;
        }
        self.finished.send_replace(true);
    }
}

struct ServiceObserver {
    state: Arc<ServiceState>,
}

impl RunObserver for ServiceObserver {
    fn on_iteration(&mut self, record: &IterationRecord, pool: &LabelPool, ledger: &Ledger) {
        let mut snap = self.state.snapshot();
        snap.state = RunState::Running;
        snap.iteration = Some(record.iteration);
        snap.labeled = pool.labeled_len();
        snap.unlabeled = pool.unlabeled_len();
        snap.annotation.merge(&record.annotation);
        snap.ledger = ledger.summary();
        snap.curve.push(CurvePoint {
            iteration: record.iteration,
            labeled: record.labeled,
            test_accuracy: record.test_accuracy,
            cumulative_cost: record.cumulative_cost,
            escalations: record.escalations,
        });
    }
}

/// Inputs of the run the service drives.
pub struct ServiceRun {
    pub config: RunConfig,
    pub train: Arc<Dataset>,
    pub test: Dataset,
    pub llm: Option<Box<dyn ChatBackend>>,
    pub prices: PriceTable,
    pub dir: Option<PathBuf>,
    /// How long one human round may take; unbounded when `None`.
    pub human_timeout: Option<Duration>,
}

/// Starts the run on its own thread. Its human channel is `state`'s queue.
pub fn spawn_run(run: ServiceRun, state: Arc<ServiceState>) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let human = QueueAnnotator::new(Arc::clone(&state.queue), run.human_timeout);
        let mut observer = ServiceObserver {
            state: Arc::clone(&state),
        };
        let outcome = run_one(
            &run.config,
            run.train,
            &run.test,
            run.llm.as_deref(),
            &human,
            &run.prices,
            run.dir.as_deref(),
            &mut observer,
        );
        match outcome {
            Ok(result) => {
                tracing::info!(run = %result.run_id, accuracy = result.final_accuracy, "run completed");
                state.finish(None);
            }
            Err(e) => {
                tracing::error!(error = format!("{e:#}"), "run failed");
                state.finish(Some(format!("{e:#}")));
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub api_version: String,
    pub run_id: String,
    pub state: RunState,
    pub iteration: Option<usize>,
    pub iterations: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub latest_accuracy: Option<f64>,
    pub cumulative_cost: Decimal,
    pub pending: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueBody {
    pub api_version: String,
    pub class_names: Vec<String>,
    pub tasks: Vec<HumanTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub id: SampleId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBody {
    pub api_version: String,
    pub task: HumanTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBody {
    pub api_version: String,
    pub run_id: String,
    pub curve: Vec<CurvePoint>,
    pub annotation: QualityStats,
    pub ledger: LedgerSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub api_version: String,
    pub error: ErrorDetail,
}

fn error(status: StatusCode, code: &str, message: String, valid: Option<Vec<String>>) -> Response {
    let body = ErrorBody {
        api_version: API_VERSION.into(),
        error: ErrorDetail {
            code: code.into(),
            message,
            valid_labels: valid,
        },
    };
    (status, Json(body)).into_response()
}

async fn status(State(state): State<Arc<ServiceState>>) -> Json<StatusBody> {
    Json(state.status())
}

async fn queue(State(state): State<Arc<ServiceState>>) -> Json<QueueBody> {
    Json(QueueBody {
        api_version: API_VERSION.into(),
        class_names: state.queue.class_names().to_vec(),
        tasks: state.queue.pending(),
    })
}

async fn labels(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rejection) => {
            return error(
                StatusCode::BAD_REQUEST,
                "malformed_request",
                rejection.body_text(),
                None,
            )
        }
    };
    match state.queue.resolve(req.id, &req.label) {
        Ok(task) => (
            StatusCode::OK,
            Json(LabelBody {
                api_version: API_VERSION.into(),
                task,
            }),
        )
            .into_response(),
        Err(e @ RouterError::InvalidLabel { .. }) => {
            let valid = state.queue.class_names().to_vec();
            error(StatusCode::BAD_REQUEST, "invalid_label", e.to_string(), Some(valid))
        }
        Err(e @ RouterError::UnknownTask(_)) => {
            error(StatusCode::NOT_FOUND, "unknown_task", e.to_string(), None)
        }
        Err(e @ RouterError::NotPending(_)) => {
            error(StatusCode::CONFLICT, "already_resolved", e.to_string(), None)
        }
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
            None,
        ),
    }
}

async fn metrics(State(state): State<Arc<ServiceState>>) -> Json<MetricsBody> {
    let snap = state.snapshot();
    Json(MetricsBody {
        api_version: API_VERSION.into(),
        run_id: state.run_id.clone(),
        curve: snap.curve.clone(),
        annotation: snap.annotation,
        ledger: snap.ledger.clone(),
    })
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/queue", get(queue))
        .route("/labels", post(labels))
        .route("/metrics", get(metrics))
        .with_state(state)
}

/// Serves until ctrl-c or, with `exit_on_complete`, until the run finishes.
/// Aborts the queue on the way out so a blocked run thread can exit.
pub async fn serve(
    listener: TcpListener,
    state: Arc<ServiceState>,
    exit_on_complete: bool,
) -> std::io::Result<()> {
    let app = router(Arc::clone(&state));
    let watched = Arc::clone(&state);
    let shutdown = async move {
        let finished = async {
            if exit_on_complete {
                watched.wait_finished().await
            } else {
                std::future::pending::<()>().await
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => tracing::info!("interrupted"),
            _ = finished => tracing::info!("run finished; shutting down"),
        }
    };
    let served = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await;
    state.queue.abort();
    served
}
