use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one run, written before any heavy work and rewritten when the
/// run ends. Only `started_unix` and `wall_seconds` vary between reruns.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub exact_mode: bool,
    pub config: RunConfig,
    /// The resolved config in file syntax, ready for `--config`.
    pub config_text: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub status: String,
    pub started_unix: u64,
    pub wall_seconds: Option<f64>,
}

pub fn version_string() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("MATCHSRNN_GIT_DESCRIBE"))
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: &RunConfig, exact_mode: bool) -> Self {
        RunManifest {
            command: command.to_string(),
            argv,
            version: version_string(),
            seed: config.train.seed,
            exact_mode,
            config: config.clone(),
            config_text: config.to_text(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "running".into(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_seconds: None,
        }
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(out_dir.join(MANIFEST_FILE), json + "\n")
    }
}
