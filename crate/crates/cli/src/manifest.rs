//! Run directories and their manifests.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::setup::{sha256_hex, write_json, EndpointDescription, InputFile};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "result.json";
pub const PARTIAL_FILE: &str = "partial.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const ITERATIONS_FILE: &str = "iterations.jsonl";

/// What produced a run directory, enough to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub endpoint: EndpointDescription,
    pub seed: u64,
}

impl Manifest {
    pub fn new<C: Serialize>(
        command: &str,
        config: &C,
        inputs: Vec<InputFile>,
        endpoint: EndpointDescription,
        seed: u64,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_sha256: config_digest(&config, &inputs, &endpoint)?,
            config,
            inputs,
            endpoint,
            seed,
        })
    }

    /// `{out}/{first 12 hex digits}-s{seed}`.
    pub fn run_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("{}-s{}", &self.config_sha256[..12], self.seed))
    }

    /// Creates the run directory and writes the manifest into it.
    pub fn create_dir(&self, out: &Path) -> Result<PathBuf> {
        let dir = self.run_dir(out);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join(MANIFEST_FILE), self)?;
        Ok(dir)
    }
}

/// Digest over the seed-free config, input digests and endpoint.
///
/// serde_json maps keep keys sorted, so equal configs hash equally.
pub fn config_digest(
    config: &serde_json::Value,
    inputs: &[InputFile],
    endpoint: &EndpointDescription,
) -> Result<String> {
    let mut config = config.clone();
    if let Some(obj) = config.as_object_mut() {
        obj.remove("seed");
        if let Some(run) = obj.get_mut("run").and_then(|r| r.as_object_mut()) {
            run.remove("seed");
        }
    }
    let digests: Vec<&str> = inputs.iter().map(|i| i.sha256.as_str()).collect();
    let key = serde_json::json!({
        "config": config,
        "inputs": digests,
        "endpoint": endpoint,
    });
    Ok(sha256_hex(serde_json::to_string(&key)?.as_bytes()))
}

/// Appends one JSON object per line, flushing after each.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixlabel_stub::StubConfig;

    fn endpoint() -> EndpointDescription {
        EndpointDescription::Stub {
            config: StubConfig::default(),
        }
    }

    #[test]
    fn digest_ignores_seed_only() {
        let a = serde_json::json!({"run": {"seed": 1, "iterations": 10}});
        let b = serde_json::json!({"run": {"seed": 2, "iterations": 10}});
        let c = serde_json::json!({"run": {"seed": 1, "iterations": 11}});
        let da = config_digest(&a, &[], &endpoint()).unwrap();
        assert_eq!(da, config_digest(&b, &[], &endpoint()).unwrap());
        assert_ne!(da, config_digest(&c, &[], &endpoint()).unwrap());
        assert_eq!(da.len(), 64);
    }

    #[test]
    fn run_dir_layout() {
        let m = Manifest::new("al-run", &serde_json::json!({}), vec![], endpoint(), 7).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = m.create_dir(tmp.path()).unwrap();
        assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-s7"));
        let back: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(back, m);
    }
}
