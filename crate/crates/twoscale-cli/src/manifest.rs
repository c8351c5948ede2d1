//! Output directory bookkeeping and the run manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use twoscale::container::FieldContainer;
use twoscale::experiment::{ExperimentConfig, REPORT_SCHEMA_VERSION};

use crate::CliError;

/// Version of the CSV layouts documented in the README.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub versions: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub workers: usize,
    /// Every file of the run except the manifest itself.
    pub files: Vec<FileRecord>,
    /// Wall-clock timings; kept out of the numerical outputs.
    pub timing: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key.
    let sorted: serde_json::Value = serde_json::from_str(&value.to_string()).expect("reparse of own output");
    sorted.to_string()
}

/// SHA-256 of the canonical JSON form of the validated config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    sha256_hex(canonical_json(&value).as_bytes())
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Writes outputs into one directory and records each file.
pub struct OutputSink {
    dir: PathBuf,
    files: Vec<FileRecord>,
    started: u128,
}

impl OutputSink {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), started: now_ms() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord { path: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Invalid(format!("csv buffer: {e}")))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_container(&mut self, name: &str, container: &FieldContainer) -> Result<PathBuf, CliError> {
        let mut bytes = Vec::new();
        container.write_to(&mut bytes)?;
        self.write_bytes(name, &bytes)
    }

    /// Write `manifest.json` and return the manifest.
    pub fn finish(
        self,
        subcommand: &str,
        config: &ExperimentConfig,
        workers: usize,
        timing: serde_json::Value,
    ) -> Result<RunManifest, CliError> {
        let mut versions = BTreeMap::new();
        versions.insert("twoscale".to_string(), twoscale::VERSION.to_string());
        versions.insert("twoscale-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("report-schema".to_string(), REPORT_SCHEMA_VERSION.to_string());
        versions.insert("csv-schema".to_string(), CSV_SCHEMA_VERSION.to_string());
        versions.insert("container-format".to_string(), twoscale::container::FORMAT_VERSION.to_string());
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            config_hash: config_hash(config),
            base_seed: config.seed,
            versions,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            workers,
            files: self.files,
            timing,
        };
        let path = self.dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
