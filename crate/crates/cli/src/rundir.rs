//! Run directory layout:
//!
//! ```text
//! <root>/<name>/
//!   config.resolved    one TOML table per command that has run here
//!   manifest.json      per-stage seeds, checkpoints and summary numbers
//!   metrics.jsonl
//!   checkpoints/{tokenizers,probe,dar,mixar}/
//!   samples/  plots/
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mixar_core::checkpoint;
use mixar_core::tokenizers::Tokenizers;
use mixar_core::MixarError;
use serde_json::{json, Value};

use crate::config::{read_file, strip_nulls, to_toml};
use crate::error::CliError;

pub const ROOT_ENV: &str = "MIXAR_RUNS_ROOT";
pub const RESOLVED: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";

pub fn default_root() -> PathBuf {
    std::env::var_os(ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path, name: &str) -> Result<Self, CliError> {
        if name.is_empty() || name.contains(['/', '\\']) || name == ".." {
            return Err(CliError::Usage(format!("invalid run name {name:?}")));
        }
        let path = root.join(name);
        for sub in ["checkpoints", "samples", "plots"] {
            fs::create_dir_all(path.join(sub))?;
        }
        let metrics = path.join(METRICS);
        if !metrics.exists() {
            fs::write(&metrics, "")?;
        }
        let run = Self { path };
        if !run.path.join(MANIFEST).exists() {
            run.write_manifest(&json!({ "run": name, "stages": {} }))?;
        }
        Ok(run)
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.path.join("checkpoints").join(stage)
    }

    /// The checkpoint directory of an upstream stage, or a dependency error
    /// naming the command that produces it.
    pub fn require(&self, stage: &str, producer: &str) -> Result<PathBuf, CliError> {
        let dir = self.checkpoint(stage);
        if checkpoint::exists(&dir) || Tokenizers::exists(&dir) {
            Ok(dir)
        } else {
            Err(MixarError::Dependency(format!(
                "no {stage} checkpoint in {}; run `{producer}` first",
                self.path.display()
            ))
            .into())
        }
    }

    pub fn manifest(&self) -> Result<Value, CliError> {
        let text = fs::read_to_string(self.path.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
    }

    fn write_manifest(&self, v: &Value) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))?;
        fs::write(self.path.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    /// Replaces the manifest entry of `stage`.
    pub fn record_stage(&self, stage: &str, mut entry: Value) -> Result<(), CliError> {
        let mut m = self.manifest()?;
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        entry["finished_unix"] = json!(secs);
        entry["code_version"] = json!(env!("CARGO_PKG_VERSION"));
        m["stages"][stage] = entry;
        self.write_manifest(&m)
    }

    pub fn stage(&self, stage: &str) -> Result<Value, CliError> {
        Ok(self.manifest()?["stages"][stage].clone())
    }

    /// Stores the resolved config of `command` as its own table, keeping the
    /// tables of other commands.
    pub fn write_resolved(&self, command: &str, resolved: &Value) -> Result<(), CliError> {
        let path = self.path.join(RESOLVED);
        let mut all = if path.exists() {
            let text = fs::read_to_string(&path)?;
            let t: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(e.to_string()))?;
            serde_json::to_value(t).map_err(|e| CliError::Usage(e.to_string()))?
        } else {
            json!({})
        };
        all[command] = strip_nulls(resolved);
        fs::write(&path, to_toml(&all)?)?;
        Ok(())
    }

    pub fn read_resolved(&self, command: &str) -> Result<Value, CliError> {
        read_file(&self.path.join(RESOLVED), command)
    }
}
