use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mixlabel_cli::manifest::RESULT_FILE;
use mixlabel_cli::service::{
    serve, spawn_run, ErrorBody, LabelBody, MetricsBody, QueueBody, RunState, ServiceRun,
    ServiceState, StatusBody, API_VERSION,
};
use mixlabel_cli::synth_cmd::review_splits;
use mixlabel_core::al::{RunConfig, RunResult};
use mixlabel_core::corpus::LabelSource;
use mixlabel_core::ledger::PriceTable;
use mixlabel_core::router::{AnnotationMode, HumanQueue};
use mixlabel_stub::{GoldSource, Stub, StubBackend, StubConfig};
use reqwest::blocking::Client;
use reqwest::StatusCode;

struct Harness {
    base: String,
    http: Client,
    gold: HashMap<String, String>,
    state: Arc<ServiceState>,
    dir: tempfile::TempDir,
    _server: std::thread::JoinHandle<()>,
    worker: Option<std::thread::JoinHandle<()>>,
}

fn start(mode: AnnotationMode, inconsistency_rate: f64) -> Harness {
    let splits = review_splits(300, 100, 11);
    let (train, test) = splits.datasets("reviews").unwrap();
    let gold: HashMap<String, String> = train
        .samples
        .iter()
        .map(|s| (s.text.clone(), train.class_names[s.gold_label.unwrap()].clone()))
        .collect();
    let stub = Stub::new(
        StubConfig {
            inconsistency_rate,
            ..StubConfig::default()
        },
        GoldSource::from_dataset(&train),
    )
    .unwrap();
    let config = RunConfig {
        dataset: "reviews".into(),
        mode,
        iterations: 2,
        batch_k: 5,
        init_size: 10,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let queue = Arc::new(HumanQueue::new(train.class_names.clone()));
    let state = ServiceState::new(&config, queue, train.len());

    let runtime = tokio::runtime::Runtime::new().unwrap();
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let served = Arc::clone(&state);
    let server = std::thread::spawn(move || {
        runtime.block_on(serve(listener, served, false)).unwrap();
    });
    let worker = spawn_run(
        ServiceRun {
            config,
            train: Arc::new(train),
            test,
            llm: Some(Box::new(StubBackend::new(stub))),
            prices: PriceTable::default(),
            dir: Some(dir.path().to_path_buf()),
            human_timeout: Some(Duration::from_secs(60)),
        },
        Arc::clone(&state),
    );
    Harness {
        base,
        http: Client::new(),
        gold,
        state,
        dir,
        _server: server,
        worker: Some(worker),
    }
}

impl Harness {
    fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> T {
        let resp = self.http.get(format!("{}{path}", self.base)).send().unwrap();
        assert_eq!(resp.status(), StatusCode::OK, "GET {path}");
        resp.json().unwrap()
    }

    fn post_label(&self, id: usize, label: &str) -> reqwest::blocking::Response {
        self.http
            .post(format!("{}/labels", self.base))
            .json(&serde_json::json!({"id": id, "label": label}))
            .send()
            .unwrap()
    }

    /// Labels whatever is pending with gold until the run finishes.
    fn drive(&mut self) -> Vec<usize> {
        let mut labeled = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(120);
        while !self.state.is_finished() {
            assert!(Instant::now() < deadline, "run did not finish");
            let q: QueueBody = self.get("/queue");
            assert_eq!(q.api_version, API_VERSION);
            for task in q.tasks {
                let resp = self.post_label(task.id, &self.gold[&task.text]);
                assert_eq!(resp.status(), StatusCode::OK);
                let body: LabelBody = resp.json().unwrap();
                assert_eq!(body.task.resolved_label.as_deref(), Some(&*self.gold[&task.text]));
                labeled.push(task.id);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        self.worker.take().unwrap().join().unwrap();
        labeled
    }

    fn result(&self) -> RunResult {
        let text = std::fs::read_to_string(self.dir.path().join(RESULT_FILE)).unwrap();
        serde_json::from_str(&text).unwrap()
    }
}

fn wait_for_pending(h: &Harness) -> QueueBody {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let q: QueueBody = h.get("/queue");
        if !q.tasks.is_empty() {
            return q;
        }
        assert!(Instant::now() < deadline, "nothing was escalated");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn escalations_are_labeled_over_http_until_the_run_completes() {
    let mut h = start(AnnotationMode::Mixed, 1.0);
    let q = wait_for_pending(&h);
    assert_eq!(q.class_names, vec!["Negative", "Positive"]);
    assert_eq!(q.tasks.len(), 5);

    let status: StatusBody = h.get("/status");
    assert_eq!(status.api_version, API_VERSION);
    assert_eq!(status.state, RunState::AwaitingHuman);
    assert_eq!((status.iteration, status.iterations), (Some(0), 2));
    assert_eq!((status.labeled, status.unlabeled, status.pending), (10, 290, 5));
    assert!(status.latest_accuracy.is_some());

    let labeled = h.drive();
    assert_eq!(labeled.len(), 10, "every queried sample is inconsistent at rate 1");

    let status: StatusBody = h.get("/status");
    assert_eq!(status.state, RunState::Completed);
    assert_eq!((status.labeled, status.pending), (20, 0));
    let q: QueueBody = h.get("/queue");
    assert!(q.tasks.is_empty());

    let metrics: MetricsBody = h.get("/metrics");
    assert_eq!(metrics.curve.len(), 3);
    assert_eq!(metrics.annotation.total, 10);
    assert_eq!(metrics.annotation.consistent, 0);
    assert_eq!(metrics.ledger.total.cost_usd, status.cumulative_cost);
    assert!(status.cumulative_cost > rust_decimal::Decimal::ZERO);

    let result = h.result();
    let train = review_splits(300, 100, 11).datasets("reviews").unwrap().0;
    let humans: Vec<_> = result
        .labels
        .iter()
        .filter(|(_, _, s)| *s == LabelSource::Human)
        .collect();
    assert_eq!(humans.len(), 10);
    for (id, label, _) in humans {
        assert_eq!(Some(*label), train.samples[*id].gold_label);
        assert!(labeled.contains(id));
    }
    assert_eq!(result.total_cost, status.cumulative_cost);
}

#[test]
fn label_errors_map_to_status_codes() {
    let mut h = start(AnnotationMode::HumanOnly, 0.0);
    let q = wait_for_pending(&h);
    let task = &q.tasks[0];

    let resp = h.post_label(task.id, "Neutral");
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let err: ErrorBody = resp.json().unwrap();
    assert_eq!(err.api_version, API_VERSION);
    assert_eq!(err.error.code, "invalid_label");
    assert_eq!(
        err.error.valid_labels,
        Some(vec!["Negative".to_string(), "Positive".to_string()])
    );

    let resp = h.post_label(1_000_000, "Positive");
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);

    let resp = h
        .http
        .post(format!("{}/labels", h.base))
        .header("content-type", "application/json")
        .body("{\"id\": \"x\"}")
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let err: ErrorBody = resp.json().unwrap();
    assert_eq!(err.error.code, "malformed_request");

    // lower-case is accepted and stored in canonical spelling
    let gold = h.gold[&task.text].clone();
    let resp = h.post_label(task.id, &gold.to_lowercase());
    assert_eq!(resp.status(), StatusCode::OK);
    let body: LabelBody = resp.json().unwrap();
    assert_eq!(body.task.resolved_label, Some(gold.clone()));

    let resp = h.post_label(task.id, &gold);
    assert_eq!(resp.status(), StatusCode::CONFLICT);

    h.drive();
    assert_eq!(h.get::<StatusBody>("/status").state, RunState::Completed);
    assert_eq!(h.result().curve.len(), 3);
}
