//! Run manifest written alongside every command's artifacts.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub config: dytx_core::config::FileConfig,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: dytx_core::config::FileConfig,
    started: chrono::DateTime<chrono::Utc>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: &dytx_core::config::FileConfig) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config: config.clone(),
            started: chrono::Utc::now(),
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(self, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            started: self.started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
            outputs: self.outputs,
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}
