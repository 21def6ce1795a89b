use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

/// Record of one command run, written next to its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_secs: u64,
    pub elapsed_secs: f64,
}

pub struct Run {
    command: &'static str,
    started: Instant,
    started_unix: u64,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// `path` with `suffix` appended to the full file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Run {
            command,
            started: Instant::now(),
            started_unix,
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Checks every output exists and is non-empty, then writes the manifest
    /// beside `primary`.
    pub fn finish(self, primary: &Path) -> Result<PathBuf> {
        for out in &self.outputs {
            let len = std::fs::metadata(out)
                .with_context(|| format!("output {} was not written", out.display()))?
                .len();
            ensure!(len > 0, "output {} is empty", out.display());
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_secs: self.started_unix,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = sidecar(primary, ".manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_to_the_file_name() {
        assert_eq!(sidecar(Path::new("out/y.csm"), ".phi.json"), PathBuf::from("out/y.csm.phi.json"));
    }

    #[test]
    fn finish_rejects_missing_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start("test");
        run.output(&dir.path().join("missing"));
        assert!(run.finish(&dir.path().join("x")).is_err());
    }
}
