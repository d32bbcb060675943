//! Run directory: `config.json`, `manifest.json`, `metrics.csv`,
//! `checkpoints/` and `reports/` under `<root>/<command>-<timestamp>-<hash>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::CliError;
use crate::trainer::config_hash;

pub const OUT_ROOT_ENV: &str = "VOCO_OUT_ROOT";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub created: String,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory and writes the resolved config and
    /// manifest into it.
    pub fn create(out: Option<&Path>, command: &str, config: &RunConfig) -> Result<Self, CliError> {
        let base = match out {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
        };
        let hash = config_hash(config);
        let now = chrono::Utc::now();
        let stem = format!("{command}-{}-{}", now.format("%Y%m%dT%H%M%S"), &hash[..12]);
        let mut root = base.join(&stem);
        let mut n = 1;
        while root.exists() {
            root = base.join(format!("{stem}-{n}"));
            n += 1;
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("reports"))?;
        let dir = Self { root };
        dir.write_json("config.json", config)?;
        let manifest = RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_hash: hash,
            seed: config.trainer.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            created: now.to_rfc3339(),
        };
        dir.write_json("manifest.json", &manifest)?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text)?;
        Ok(path)
    }
}
