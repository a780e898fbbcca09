use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::Result;
use crate::model::ArchConfig;

/// Record of one command invocation, written as pretty JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: Option<RunConfig>,
    /// The resolved architecture, including `k_permille`.
    pub arch: Option<ArchConfig>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub metrics: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: None,
            arch: None,
            seed: None,
            artifacts: Vec::new(),
            metrics: serde_json::Value::Null,
            wall_clock_secs: 0.0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::error::Error::Format(e.to_string()))
    }

    pub fn write(&mut self, path: &Path, started: Instant) -> Result<()> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        if self.seed.is_none() {
            self.seed = self.config.as_ref().map(|c| c.seed);
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }
}
