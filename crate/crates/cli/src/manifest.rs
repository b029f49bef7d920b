//! Per-run record of what a subcommand read, wrote and with which settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use vitlab::checkpoint::{write_atomic, RunConfig};

use crate::error::CliError;

pub struct RunManifest {
    pub subcommand: &'static str,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl RunManifest {
    pub fn new(subcommand: &'static str, config: RunConfig, seed: u64) -> Self {
        RunManifest {
            subcommand,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes `bytes` atomically and records the file as an artifact.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn render(&self) -> Result<String, CliError> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut s = String::new();
        let _ = writeln!(s, "subcommand: {}", self.subcommand);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "timestamp: {timestamp}");
        for p in &self.inputs {
            let _ = writeln!(s, "input: {}", p.display());
        }
        for p in &self.outputs {
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            let _ = writeln!(s, "output: {} sha256={}", p.display(), sha256_hex(&bytes));
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config.to_toml());
        Ok(s)
    }

    pub fn finish(self, path: &Path) -> Result<(), CliError> {
        let text = self.render()?;
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}
