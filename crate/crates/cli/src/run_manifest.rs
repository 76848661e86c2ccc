//! Run record written next to every command's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    seed: u64,
    threads: Option<usize>,
    config: Vec<(String, String)>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
    start: Instant,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, threads: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            threads,
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs.push((key.to_string(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, key: &str, path: &Path) -> &mut Self {
        self.outputs.push((key.to_string(), path.to_path_buf()));
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "tool_version={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "argv={}", self.argv.join(" "));
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(
            s,
            "threads={}",
            self.threads.map_or_else(|| "default".to_string(), |t| t.to_string())
        );
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (k, p) in &self.inputs {
            let _ = writeln!(s, "input.{k}={}", p.display());
        }
        for (k, p) in &self.outputs {
            let _ = writeln!(s, "output.{k}={}", p.display());
        }
        let _ = writeln!(s, "wall_seconds={:.3}", self.start.elapsed().as_secs_f64());
        s
    }

    /// Writes `<dir>/<command>.run` for a directory, `<file>.run` otherwise.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = if output.is_dir() {
            output.join(format!("{}.run", self.command))
        } else {
            let mut name = output.as_os_str().to_owned();
            name.push(".run");
            PathBuf::from(name)
        };
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
