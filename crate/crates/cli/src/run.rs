use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Where the dataset of a run came from.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSource {
    /// `generated` from the config, or `loaded` from a directory.
    pub source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub manifest_sha256: String,
}

/// The `run.json` record.
#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    arguments: &'a BTreeMap<String, serde_json::Value>,
    seed: u64,
    config_sha256: String,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<&'a DatasetSource>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    /// Relative path to sha256 of every file the run wrote.
    artifacts: &'a BTreeMap<String, String>,
}

/// An append-only run directory. It must be new or empty, and no file in it
/// is ever written twice.
pub struct RunDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(|e| CliError::Config(format!("{}: {e}", root.display())))?;
            if entries.next().is_some() {
                return Err(CliError::Config(format!(
                    "{} already holds a run; runs are never overwritten",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::Config(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn prepare(&self, rel: &str) -> Result<PathBuf, CliError> {
        if self.artifacts.contains_key(rel) {
            return Err(CliError::Runtime(format!("{rel} was already written in this run")));
        }
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        }
        Ok(path)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.prepare(rel)?;
        fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_csv(&mut self, rel: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(CliError::runtime)?;
        for row in rows {
            w.write_record(row).map_err(CliError::runtime)?;
        }
        let bytes = w.into_inner().map_err(CliError::runtime)?;
        self.write(rel, &bytes)
    }

    /// Writes through `produce`, which receives the target path, then records
    /// whatever landed there.
    pub fn write_with(
        &mut self,
        rel: &str,
        produce: impl FnOnce(&Path) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let path = self.prepare(rel)?;
        produce(&path)?;
        self.record_tree(rel)
    }

    /// Hashes a file, or every file below a directory, written by someone else.
    fn record_tree(&mut self, rel: &str) -> Result<(), CliError> {
        let path = self.path(rel);
        if path.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<Result<_, _>>()
                .map_err(CliError::runtime)?;
            names.sort();
            for name in names {
                self.record_tree(&format!("{rel}/{name}"))?;
            }
        } else {
            let bytes = fs::read(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            self.artifacts.insert(rel.to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }

    /// Writes `run.json`, for failed runs too.
    pub fn finish(
        mut self,
        command: &str,
        arguments: &BTreeMap<String, serde_json::Value>,
        config: &ExperimentConfig,
        dataset: Option<&DatasetSource>,
        outcome: &Result<(), CliError>,
    ) -> Result<(), CliError> {
        let artifacts = std::mem::take(&mut self.artifacts);
        let record = Provenance {
            tool: "rarevent",
            version: env!("CARGO_PKG_VERSION"),
            command,
            arguments,
            seed: config.seed,
            config_sha256: config.sha256(),
            config,
            dataset,
            status: if outcome.is_ok() { "ok" } else { "failed" },
            error: outcome.as_ref().err().map(ToString::to_string),
            artifacts: &artifacts,
        };
        self.write_json("run.json", &record)
    }
}
