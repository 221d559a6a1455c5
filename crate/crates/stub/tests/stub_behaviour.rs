use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

use mixlabel_core::annotator::wire::{ChatMessage, ChatRequest, ResponseFormat};
use mixlabel_core::annotator::{
    parse_label_slots, render_numbered, AnnotatorConfig, ChatBackend, HttpChatClient, LlmAnnotator,
    PromptMeta, RetryPolicy, TransportError,
};
use mixlabel_core::corpus::{ClassId, SampleId};
use mixlabel_core::synth::{movie_reviews, write_csv, REVIEW_CLASSES};
use mixlabel_stub::{BackgroundServer, GoldSource, Stub, StubBackend, StubConfig};

fn names() -> Vec<String> {
    REVIEW_CLASSES.map(String::from).to_vec()
}

fn gold_for(records: &[(String, ClassId)]) -> GoldSource {
    let mut g = GoldSource::new(names());
    for (t, l) in records {
        g.insert(t, *l);
    }
    g
}

fn request(texts: &[&str], n: u32) -> ChatRequest {
    ChatRequest {
        model: "gpt-3.5-turbo-1106".into(),
        messages: vec![ChatMessage::system("classify"), ChatMessage::user(render_numbered(texts))],
        n,
        temperature: 0.2,
        response_format: Some(ResponseFormat::json_object()),
    }
}

#[test]
fn error_rate_monte_carlo() {
    let records = movie_reviews(1000, 77);
    let stub = Stub::new(
        StubConfig { error_rate: 0.2, seed: 11, ..Default::default() },
        gold_for(&records),
    )
    .unwrap();
    let mut wrong = 0usize;
    for chunk in records.chunks(10) {
        let texts: Vec<&str> = chunk.iter().map(|(t, _)| t.as_str()).collect();
        let resp = stub.respond(&request(&texts, 3)).unwrap();
        let parsed: Vec<Vec<Option<ClassId>>> = resp
            .choices
            .iter()
            .map(|c| parse_label_slots(c.message.content.as_deref().unwrap(), texts.len(), &names()).unwrap())
            .collect();
        for (i, (_, gold)) in chunk.iter().enumerate() {
            // with no inconsistency all completions agree
            assert!(parsed.iter().all(|p| p[i] == parsed[0][i]));
            if parsed[0][i] != Some(*gold) {
                wrong += 1;
            }
        }
    }
    let rate = wrong as f64 / 1000.0;
    assert!((rate - 0.2).abs() <= 0.03, "measured error rate {rate}");
}

#[test]
fn inconsistency_rate_one_escalates_everything() {
    let records = movie_reviews(40, 5);
    let backend = StubBackend::new(
        Stub::new(StubConfig { inconsistency_rate: 1.0, ..Default::default() }, gold_for(&records)).unwrap(),
    );
    let meta = PromptMeta::new("movie reviews", names());
    let config = AnnotatorConfig { demos_per_class: 0, ..Default::default() };
    let annotator = LlmAnnotator::new(&backend, config, meta);
    let samples: Vec<(SampleId, &str)> = records.iter().enumerate().map(|(i, (t, _))| (i, t.as_str())).collect();
    let batches = annotator.annotate(&samples, &[], 0).unwrap();
    assert!(batches.iter().flat_map(|b| &b.verdicts).all(|v| !v.is_consistent()));
}

#[test]
fn background_server_matches_in_process() {
    let records = movie_reviews(30, 9);
    let config = StubConfig { error_rate: 0.3, inconsistency_rate: 0.3, seed: 2, ..Default::default() };
    let stub = Stub::new(config.clone(), gold_for(&records)).unwrap();
    let server = BackgroundServer::start(stub.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
    let client = HttpChatClient::new(server.completions_url(), Some("token".into()), RetryPolicy::default());
    let texts: Vec<&str> = records.iter().take(10).map(|(t, _)| t.as_str()).collect();
    let req = request(&texts, 3);
    assert_eq!(client.complete(&req).unwrap(), stub.respond(&req).unwrap());

    let bad = ChatRequest { n: 0, ..req };
    match client.complete(&bad) {
        Err(TransportError::Fatal(msg)) => assert!(msg.contains("400"), "{msg}"),
        other => panic!("expected a 400, got {other:?}"),
    }
}

#[test]
fn malformed_body_is_400_with_json_error() {
    let stub = Stub::new(StubConfig::default(), GoldSource::new(names())).unwrap();
    let server = BackgroundServer::start(stub, "127.0.0.1:0".parse().unwrap()).unwrap();
    let resp = reqwest::blocking::Client::new()
        .post(server.completions_url())
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let body: serde_json::Value = resp.json().unwrap();
    assert!(body["error"]["message"].is_string());
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn binary_serves_from_gold_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gold.csv");
    let records = movie_reviews(20, 3);
    write_csv(std::fs::File::create(&path).unwrap(), &REVIEW_CLASSES, &records).unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_mixlabel-stub"))
        .args(["--bind", "127.0.0.1:0", "--seed", "4", "--reply-format", "json", "--gold"])
        .arg(&path)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let child = KillOnDrop(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    let client = HttpChatClient::new(format!("{base}/v1/chat/completions"), None, RetryPolicy::default());
    let texts: Vec<&str> = records.iter().take(5).map(|(t, _)| t.as_str()).collect();
    let resp = client.complete(&request(&texts, 2)).unwrap();
    let expected: Vec<Option<ClassId>> = records.iter().take(5).map(|(_, l)| Some(*l)).collect();
    for c in &resp.choices {
        let content = c.message.content.as_deref().unwrap();
        assert!(content.starts_with('{'));
        assert_eq!(parse_label_slots(content, 5, &names()).unwrap(), expected);
    }
    drop(child);
}
