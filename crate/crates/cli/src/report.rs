use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const REPORT_FILE: &str = "run_report.json";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Machine-readable record of one command run.
///
/// `wall_time_s` and `finished_unix_s` are the only fields that vary between
/// identical runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of each input, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 over the sorted `role=digest` lines.
    pub inputs_hash: String,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
    pub threads: usize,
    pub wall_time_s: f64,
    pub finished_unix_s: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a file, or of every file below a directory (relative path and
/// contents, in path order). Run reports are skipped so that timings do not
/// leak into downstream hashes.
pub fn hash_path(path: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0u8]);
            let bytes = std::fs::read(path.join(&rel)).with_context(|| format!("reading {rel}"))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != REPORT_FILE) {
            out.push(p.strip_prefix(root)?.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        let digest = hash_path(path).with_context(|| format!("hashing {role} input"))?;
        self.inputs.insert(role.to_string(), digest);
        Ok(())
    }

    pub fn finish(
        self,
        out_dir: &Path,
        config: &impl Serialize,
        metrics: serde_json::Value,
    ) -> anyhow::Result<RunReport> {
        let mut h = Sha256::new();
        for (role, digest) in &self.inputs {
            h.update(format!("{role}={digest}\n"));
        }
        let report = RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            inputs_hash: hex(&h.finalize()),
            inputs: self.inputs,
            config: serde_json::to_value(config)?,
            metrics,
            threads: rayon::current_num_threads(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        std::fs::write(out_dir.join(REPORT_FILE), bytes)?;
        Ok(report)
    }
}
