use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const TOOL: &str = "dgcnet";

/// Everything needed to repeat a command: its arguments, the resolved
/// configuration, and what it produced.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub threads: usize,
    pub args: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<crate::config::Resolved>,
    pub artifacts: Vec<PathBuf>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub results: Value,
}

impl Manifest {
    pub fn new(command: &'static str, g: &crate::Global, args: Value) -> Self {
        Self {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: g.seed,
            deterministic: g.deterministic,
            threads: g.threads(),
            args,
            config: None,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            results: Value::Null,
        }
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.into(), start.elapsed().as_secs_f64());
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        dgcnet::checkpoint::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
