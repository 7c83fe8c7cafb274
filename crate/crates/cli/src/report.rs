use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;

/// JSON report written by `eval` and `transductive`.
///
/// Wall time and thread count vary between runs of the same configuration,
/// so they are only embedded when `--report-timing` is set.
#[derive(Debug, Serialize)]
pub struct RunReport<C, R> {
    pub command: &'static str,
    pub config: C,
    pub seed: u64,
    pub results: R,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Timing {
    pub wall_time_secs: f64,
    pub threads: usize,
}

impl Timing {
    pub fn new(elapsed: Duration, threads: usize) -> Self {
        Self {
            wall_time_secs: elapsed.as_secs_f64(),
            threads,
        }
    }
}

impl<C: Serialize, R: Serialize> RunReport<C, R> {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` via a sibling staging file and a rename, so a
/// failed run never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let staging = staging_path(path);
    let result = fs::write(&staging, bytes).and_then(|_| fs::rename(&staging, path));
    if result.is_err() {
        let _ = fs::remove_file(&staging);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

/// Writes to `out`, or to stdout when no path was given.
pub fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, contents.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(contents.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}
