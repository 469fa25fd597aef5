use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ebsde_cli::{run, RunOptions, Subcommand, EXIT_ERROR};

/// Experiment runner for ergodic BSDEs with periodic OU dynamics and jumps.
#[derive(Debug, Parser)]
#[command(name = "ebsde-lab", version)]
struct Args {
    /// Pipeline to run.
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to `output.dir` or `out`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let opts = RunOptions {
        subcommand: a.subcommand,
        config: a.config,
        seed: a.seed,
        workers: a.workers,
        out_dir: a.out_dir,
        overrides: a.overrides,
    };
    match run(&opts) {
        Ok(r) => {
            println!("{}: wrote {}", opts.subcommand, r.out_dir.join("manifest.json").display());
            for f in &r.failures {
                eprintln!("diagnostic failed: {f}");
            }
            ExitCode::from(r.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
