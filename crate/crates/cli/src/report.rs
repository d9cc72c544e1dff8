//! JSON run reports: inputs, seeds, resolved configuration and output hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shapefuse::store;

use crate::registry::{Registry, REPORTS};
use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name; replaying them reproduces the run.
    pub argv: Vec<String>,
    pub jobs: Option<usize>,
    pub config_file: Option<String>,
    /// Resolved settings (flag > config file > default).
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Registry inputs and their hashes.
    pub inputs: BTreeMap<String, String>,
    /// Registry outputs and their hashes.
    pub outputs: BTreeMap<String, String>,
    /// Plain files written outside the registry, with SHA-256.
    pub files: BTreeMap<String, String>,
    /// Free-form numbers worth keeping (skipped items, ranks, ...).
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunReport {
    pub fn new(command: &str, argv: &[String], jobs: Option<usize>, config_file: Option<&Path>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            jobs,
            config_file: config_file.map(|p| p.display().to_string()),
            ..Default::default()
        }
    }

    pub fn input(&mut self, reg: &Registry, id: &str) {
        if let Ok(e) = reg.entry(id) {
            self.inputs.insert(id.into(), e.hash.clone());
        }
    }

    pub fn file(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)?;
        self.files.insert(path.display().to_string(), store::sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `reports/<command>-<tag>.json` under the registry root.
    pub fn write(&self, reg: &Registry, tag: &str) -> Result<PathBuf, CliError> {
        let dir = reg.root().join(REPORTS);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}-{tag}.json", self.command));
        store::write_json(&path, self)?;
        Ok(path)
    }
}
