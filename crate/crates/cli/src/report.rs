//! Append-only run reports: one JSON object per line in `<out>/reports.jsonl`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const REPORTS_FILE: &str = "reports.jsonl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(zmask::Error::Io { path: path.to_path_buf(), source: e })
}

pub struct Report {
    command: &'static str,
    out: PathBuf,
    config_sha256: String,
    config: Value,
    seed: u64,
    metrics: Map<String, Value>,
    records: Vec<Value>,
    artifacts: Vec<PathBuf>,
}

impl Report {
    pub fn new(command: &'static str, out: &Path, config_bytes: &[u8], config: Value, seed: u64) -> Self {
        Report {
            command,
            out: out.to_path_buf(),
            config_sha256: sha256_hex(config_bytes),
            config,
            seed,
            metrics: Map::new(),
            records: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn metric(&mut self, name: &str, value: impl Into<Value>) {
        self.metrics.insert(name.to_string(), value.into());
    }

    pub fn record(&mut self, value: Value) {
        self.records.push(value);
    }

    /// Marks a file under the output directory for hashing.
    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn write(self) -> Result<(), CliError> {
        let mut hashes = Map::new();
        for rel in &self.artifacts {
            let path = self.out.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
            hashes.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes).into());
        }
        let line = json!({
            "command": self.command,
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
            "records": self.records,
            "artifacts": hashes,
        });
        let path = self.out.join(REPORTS_FILE);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| io(&path, e))
    }
}
