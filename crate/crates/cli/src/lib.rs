//! Configuration-driven runner for the `ebsde-core` laboratory.
//!
//! `run` loads a TOML config, applies overrides, executes one pipeline on a
//! worker pool of the requested size and writes `manifest.json` next to the
//! pipeline's CSV artifacts.

pub mod config;
pub mod error;
pub mod manifest;
pub mod run;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{load, ExperimentConfig, LoadedConfig};
pub use error::CliError;
pub use run::{execute, Artifact, Outcome, Subcommand};

/// Exit status when every diagnostic passed.
pub const EXIT_OK: i32 = 0;
/// Exit status for operational errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when the run finished but a diagnostic failed.
pub const EXIT_DIAGNOSTIC: i32 = 2;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub subcommand: Subcommand,
    pub config: PathBuf,
    pub seed: Option<u64>,
    /// `None` uses one worker per core.
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub failures: Vec<String>,
}

pub fn run(opts: &RunOptions) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let loaded = load(&opts.config, &opts.overrides, opts.seed)?;
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| loaded.config.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = opts.workers {
        if w == 0 {
            return Err(CliError::Config { key: "--workers".into(), msg: "must be positive".into() });
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    log::info!("running {} on {} workers", opts.subcommand, pool.current_num_threads());
    let outcome = pool.install(|| execute(opts.subcommand, &loaded.config))?;
    std::fs::create_dir_all(&out_dir)?;
    for a in &outcome.artifacts {
        std::fs::write(out_dir.join(&a.name), &a.bytes)?;
    }
    let exit_code = if outcome.failures.is_empty() { EXIT_OK } else { EXIT_DIAGNOSTIC };
    let m = manifest::build(opts, &loaded, &outcome, exit_code, pool.current_num_threads(), started.elapsed());
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), text + "\n")?;
    for f in &outcome.failures {
        log::warn!("diagnostic failed: {f}");
    }
    Ok(RunReport { exit_code, out_dir, failures: outcome.failures })
}

/// Config files shipped under `configs/`, sorted by name.
pub fn shipped_configs(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root.join("configs"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    v.sort();
    Ok(v)
}
