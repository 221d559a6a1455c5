//! Config files, dataset loading and endpoint construction shared by commands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use mixlabel_core::al::RunConfig;
use mixlabel_core::annotator::{ChatBackend, HttpChatClient, RetryPolicy};
use mixlabel_core::corpus::{load_dataset, DataFormat, Dataset, Split};
use mixlabel_core::ledger::PriceTable;
use mixlabel_stub::{GoldSource, ReplyFormat, Stub, StubBackend, StubConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::EvalConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Class names in label-index order; inferred (sorted) when absent.
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Chat-completions URL. Without one the built-in stub answers in-process.
    pub url: Option<String>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub retry: RetryPolicy,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            api_key_env: "OPENAI_API_KEY".into(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Everything an experiment reads from its TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub run: RunConfig,
    pub endpoint: EndpointConfig,
    pub stub: StubConfig,
    /// Grid settings for `annotate-eval`.
    pub eval: EvalConfig,
    /// Price table TOML; built-in rates when absent.
    pub prices: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a TOML file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        rebase(&mut cfg.data.train);
        rebase(&mut cfg.data.test);
        rebase(&mut cfg.prices);
        Ok(cfg)
    }
}

pub fn load_prices(path: Option<&Path>) -> Result<PriceTable> {
    match path {
        None => Ok(PriceTable::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing price table {}", p.display()))
        }
    }
}

/// Endpoint flags common to every command that talks to an LLM.
#[derive(Debug, Clone, Default, Args)]
pub struct EndpointArgs {
    /// Chat-completions URL; omit to use the built-in stub.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable with the endpoint's bearer token.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Stub: seed of the per-sample noise.
    #[arg(long)]
    pub stub_seed: Option<u64>,
    /// Stub: probability a sample's agreed label is wrong.
    #[arg(long)]
    pub stub_error_rate: Option<f64>,
    /// Stub: probability one completion disagrees.
    #[arg(long)]
    pub stub_inconsistency_rate: Option<f64>,
    /// Stub: reply as a numbered list or a JSON object.
    #[arg(long, value_parser = ["numbered", "json"])]
    pub stub_reply_format: Option<String>,
    /// Retries for transient HTTP failures.
    #[arg(long)]
    pub max_retries: Option<u32>,
}

impl EndpointArgs {
    pub fn apply(&self, endpoint: &mut EndpointConfig, stub: &mut StubConfig) {
        if let Some(u) = &self.endpoint {
            endpoint.url = Some(u.clone());
        }
        if let Some(k) = &self.api_key_env {
            endpoint.api_key_env = k.clone();
        }
        if let Some(r) = self.max_retries {
            endpoint.retry.max_retries = r;
        }
        if let Some(s) = self.stub_seed {
            stub.seed = s;
        }
        if let Some(e) = self.stub_error_rate {
            stub.error_rate = e;
        }
        if let Some(r) = self.stub_inconsistency_rate {
            stub.inconsistency_rate = r;
        }
        match self.stub_reply_format.as_deref() {
            Some("json") => stub.reply_format = ReplyFormat::Json,
            Some(_) => stub.reply_format = ReplyFormat::Numbered,
            None => {}
        }
    }
}

/// Dataset flags.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Training split (csv or jsonl with `text` and `label`).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test split.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Comma-separated class names in label order.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
}

impl DataArgs {
    pub fn apply(&self, data: &mut DataConfig) {
        if let Some(t) = &self.train {
            data.train = Some(t.clone());
        }
        if let Some(t) = &self.test {
            data.test = Some(t.clone());
        }
        if let Some(c) = &self.classes {
            data.classes = Some(c.clone());
        }
    }
}

pub fn load_split(path: &Path, split: Split, classes: Option<&[String]>) -> Result<Dataset> {
    let format = DataFormat::from_path(path).with_context(|| {
        format!(
            "{}: unknown data format (expected .csv or .jsonl)",
            path.display()
        )
    })?;
    Ok(load_dataset(path, format, split, classes)?)
}

/// Loads train and test with one shared class list.
pub fn load_splits(data: &DataConfig) -> Result<(Arc<Dataset>, Dataset)> {
    let train_path = data.train.as_deref().context("no training data given (--train)")?;
    let test_path = data.test.as_deref().context("no test data given (--test)")?;
    let train = load_split(train_path, Split::Train, data.classes.as_deref())?;
    let test = load_split(test_path, Split::Test, Some(&train.class_names))?;
    Ok((Arc::new(train), test))
}

/// Which LLM backend a command talks to, for manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointDescription {
    Stub { config: StubConfig },
    Http { url: String, api_key_env: String },
}

/// Builds the backend. The stub takes its gold labels from `gold_from`.
pub fn build_backend(
    endpoint: &EndpointConfig,
    stub: &StubConfig,
    gold_from: &[&Dataset],
) -> Result<(Box<dyn ChatBackend>, EndpointDescription)> {
    match &endpoint.url {
        Some(url) => {
            let key = std::env::var(&endpoint.api_key_env).ok();
            if key.is_none() {
                tracing::warn!(var = %endpoint.api_key_env, "no API token in environment; sending unauthenticated requests");
            }
            let client = HttpChatClient::new(url.clone(), key, endpoint.retry.clone());
            Ok((
                Box::new(client),
                EndpointDescription::Http {
                    url: url.clone(),
                    api_key_env: endpoint.api_key_env.clone(),
                },
            ))
        }
        None => {
            let Some(first) = gold_from.first() else {
                bail!("the stub needs a dataset for gold labels");
            };
            let mut gold = GoldSource::from_dataset(first);
            for ds in &gold_from[1..] {
                gold.extend(ds)?;
            }
            let s = Stub::new(stub.clone(), gold)?;
            Ok((
                Box::new(StubBackend::new(s)),
                EndpointDescription::Stub {
                    config: stub.clone(),
                },
            ))
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
    pub rows: usize,
}

pub fn describe_input(path: &Path, rows: usize) -> Result<InputFile> {
    Ok(InputFile {
        path: path.to_path_buf(),
        sha256: file_digest(path)?,
        rows,
    })
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rust_decimal::Decimal;

    #[test]
    fn config_file_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            r#"
prices = "prices.toml"

[data]
train = "data/train.csv"
test = "/abs/test.csv"

[run]
dataset = "rt"
mode = "human"
strategy = "least_confidence"
iterations = 2

[stub]
error_rate = 0.1
"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train.unwrap(), dir.path().join("data/train.csv"));
        assert_eq!(cfg.data.test.unwrap(), PathBuf::from("/abs/test.csv"));
        assert_eq!(cfg.prices.unwrap(), dir.path().join("prices.toml"));
        assert_eq!(cfg.run.iterations, 2);
        assert_eq!(cfg.run.batch_k, 50);
        assert_eq!(cfg.stub.error_rate, 0.1);
    }

    #[test]
    fn price_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prices.toml");
        std::fs::write(
            &path,
            r#"
human_per_50_tokens = "0.20"
[models.my-model]
input_per_1k = "0.0015"
output_per_1k = "0.0020"
"#,
        )
        .unwrap();
        let p = load_prices(Some(&path)).unwrap();
        assert_eq!(p.models["my-model"].input_per_1k, Decimal::new(15, 4));
        assert_eq!(p.human_cost(50), Decimal::new(20, 2));
    }
}
