//! Artifact writing: JSON reports with provenance, CSV tables with a
//! `#`-comment provenance line, and a manifest of content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use randshift::config::RunConfig;
use randshift::models::ModelDescription;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of the configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("serializable").as_bytes())
}

pub struct Writer {
    dir: PathBuf,
    command: String,
    config: RunConfig,
    hash: String,
    model: Option<ModelDescription>,
    files: BTreeMap<String, String>,
}

impl Writer {
    pub fn new(
        dir: PathBuf,
        command: &str,
        config: RunConfig,
        model: Option<ModelDescription>,
    ) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let hash = config_hash(&config);
        Ok(Self {
            dir,
            command: command.into(),
            config,
            hash,
            model,
            files: BTreeMap::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `{schema_version, command, config_hash, config, model, ledger, result}`.
    pub fn json<T: Serialize>(
        &mut self,
        name: &str,
        result: &T,
        ledger: &BTreeMap<String, f64>,
    ) -> Result<(), CliError> {
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config_hash": self.hash,
            "config": self.config,
            "model": self.model,
            "ledger": ledger,
            "result": result,
        });
        let mut bytes = serde_json::to_vec_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.put(name, bytes)
    }

    pub fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<(), CliError> {
        let mut bytes = format!("# schema_version={SCHEMA_VERSION} config_hash={}\n", self.hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut bytes);
            w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
            for row in rows {
                w.write_record(&row).map_err(|e| CliError::Io(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
        self.put(name, bytes)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        let files: Value = self
            .files
            .iter()
            .map(|(k, v)| (k.clone(), json!(v)))
            .collect::<serde_json::Map<_, _>>()
            .into();
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config_hash": self.hash,
            "files": files,
        });
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.clear();
        Ok(())
    }
}

pub fn word(w: &[u64]) -> String {
    w.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}
