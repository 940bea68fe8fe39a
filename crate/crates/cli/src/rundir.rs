//! Per-run artifact bookkeeping: every subcommand writes its resolved
//! configuration and a manifest of inputs (content-hashed), outputs, and
//! runtime into its output directory. Timestamps and runtimes are the only
//! lines excluded from the byte-identical rerun contract.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use svkit_core::io::fnv1a;

use crate::config::ExperimentConfig;

pub struct RunDir {
    pub out: PathBuf,
    command: String,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(out: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(RunDir {
            out: out.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.push((name.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Write `config.resolved` and `run.manifest`.
    pub fn finish(self, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::write(self.out.join("config.resolved"), cfg.resolved())
            .context("writing config.resolved")?;
        let mut m = String::new();
        m.push_str(&format!("command {}\n", self.command));
        m.push_str(&format!("config_hash {:016x}\n", cfg.hash()));
        m.push_str(&format!("seed {}\n", cfg.seed().unwrap_or(0)));
        for (name, path) in &self.inputs {
            let hash = std::fs::read(path)
                .map(|bytes| format!("{:016x}", fnv1a(&bytes)))
                .unwrap_or_else(|_| "-".to_string());
            m.push_str(&format!("input {name} {} {hash}\n", path.display()));
        }
        for name in &self.outputs {
            m.push_str(&format!("output {name}\n"));
        }
        m.push_str(&format!(
            "runtime_ms {}\n",
            self.started.elapsed().as_millis()
        ));
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        m.push_str(&format!("timestamp {ts}\n"));
        std::fs::write(self.out.join("run.manifest"), m).context("writing run.manifest")
    }
}
