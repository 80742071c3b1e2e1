//! Trace persistence: CSV tables plus a JSON metadata sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pdtool_core::trace::Trace;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{canonical_json, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::run::Outcome;

/// Serializes `trace` as CSV; its columns must equal `declared` exactly.
pub fn csv_bytes(trace: &Trace, declared: &[&str]) -> Result<Vec<u8>> {
    if trace.columns().len() != declared.len() || trace.columns().iter().zip(declared).any(|(a, b)| a != b) {
        return Err(HarnessError::Trace(format!(
            "columns [{}] do not match the declared [{}]",
            trace.columns().join(", "),
            declared.join(", ")
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| HarnessError::Trace(e.to_string());
    w.write_record(declared).map_err(to_err)?;
    for row in trace.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Trace(e.to_string()))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

/// Hex SHA-256 of the canonical config. The output location is not part of it.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.output = None;
    let digest = Sha256::digest(canonical_json(&cfg).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct TraceMeta {
    file: String,
    columns: Vec<String>,
    rows: usize,
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    name: String,
    kind: &'static str,
    config_sha256: String,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    traces: Vec<TraceMeta>,
    artifacts: Vec<String>,
    flags: Vec<String>,
    extras: &'a BTreeMap<String, Value>,
}

/// Renders every file first, then writes them; a rendering error leaves the directory untouched.
pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    let stem = cfg.stem();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut traces = Vec::new();
    for t in &outcome.traces {
        let file = match t.suffix {
            Some(s) => format!("{stem}.{s}.csv"),
            None => format!("{stem}.csv"),
        };
        files.push((file.clone(), csv_bytes(&t.trace, t.declared)?));
        traces.push(TraceMeta {
            file,
            columns: t.trace.columns().to_vec(),
            rows: t.trace.len(),
        });
    }
    let mut artifacts = Vec::new();
    for (suffix, value) in &outcome.artifacts {
        let file = format!("{stem}.{suffix}.json");
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| HarnessError::Trace(e.to_string()))?;
        bytes.push(b'\n');
        files.push((file.clone(), bytes));
        artifacts.push(file);
    }
    let meta = Meta {
        name: stem.clone(),
        kind: cfg.kind.as_str(),
        config_sha256: config_hash(cfg),
        seed: cfg.seed,
        versions: BTreeMap::from([
            ("pdtool", env!("CARGO_PKG_VERSION")),
            ("pdtool-core", pdtool_core::VERSION),
        ]),
        traces,
        artifacts,
        flags: outcome.all_flags(),
        extras: &outcome.extras,
    };
    let mut bytes = serde_json::to_vec_pretty(&meta).map_err(|e| HarnessError::Trace(e.to_string()))?;
    bytes.push(b'\n');
    files.push((format!("{stem}.meta.json"), bytes));

    fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
