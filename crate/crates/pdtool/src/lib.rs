//! Experiment runner for `pdtool-core`: JSON configs in, CSV traces out.

pub mod check;
pub mod config;
pub mod error;
pub mod model;
pub mod output;
pub mod run;
pub mod schema;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use run::{prepare, Outcome, Prepared};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Error = 1,
    Flagged = 2,
}

pub const THREADS_ENV: &str = "PDTOOL_THREADS";

/// Worker pool sized by `PDTOOL_THREADS`, or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| HarnessError::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| HarnessError::Config(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub flags: Vec<String>,
}

impl RunReport {
    pub fn status(&self) -> ExitStatus {
        if self.flags.is_empty() {
            ExitStatus::Ok
        } else {
            ExitStatus::Flagged
        }
    }
}

/// Loads, validates, runs and writes one experiment. `out` and `seed` override the config.
pub fn run_config_file(path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunReport> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let dir = match (out, &cfg.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) if o.is_relative() => base.join(o),
        (None, Some(o)) => o.clone(),
        (None, None) => PathBuf::from("pdtool-out"),
    };
    run_config(&cfg, base, &dir)
}

/// Runs an already parsed config inside the `PDTOOL_THREADS` pool.
pub fn run_config(cfg: &ExperimentConfig, base: &Path, dir: &Path) -> Result<RunReport> {
    let pool = thread_pool()?;
    let prepared = prepare(cfg, base)?;
    let outcome = pool.install(|| prepared.execute())?;
    let files = output::write_outcome(dir, cfg, &outcome)?;
    Ok(RunReport {
        files,
        flags: outcome.all_flags(),
    })
}
