//! `cograph`: runs the CTR pipeline stage by stage inside a work directory.
//!
//! Exit status is 0 on success, 2 for configuration or input problems found
//! before work starts (including a missing upstream stage), 1 for failures
//! while running.

mod config;
mod error;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{PipelineConfig, RawConfig, KEYS, SYNTH_KEYS};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(
    name = "cograph",
    version,
    about = "Graph-reduced features for sparse CTR prediction"
)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable, applied after the file.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Same as `--set workdir=DIR`.
    #[arg(short, long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic log with planted clusters.
    Synth,
    /// Split the log by day and label impressions.
    Ingest,
    /// Build and filter the user × URL graph from training days.
    Graph,
    /// Reduce the graph with the configured reducers (irm, svd, nmf).
    Reduce,
    /// Encode train and test design matrices.
    Features,
    /// Fit the L1 logistic model with the configured λs.
    Train,
    /// Score the trained model on the test day.
    Eval,
    /// Select λs on a grid and report every fit.
    Tune,
    /// Serve predictions over TCP from the trained bundle.
    Serve,
    /// List config keys with their defaults.
    Keys,
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut raw = RawConfig::default();
    if let Some(path) = &cli.config {
        raw.merge_file(path)?;
    }
    if let Some(dir) = &cli.workdir {
        raw.set("workdir", &dir.display().to_string())?;
    }
    for pair in &cli.set {
        raw.set_pair(pair)?;
    }
    PipelineConfig::from_raw(raw)
}

fn finish(mut m: Manifest, dir: PathBuf, start: Instant) -> CliResult<()> {
    m.wall_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    Ok(())
}

fn run_stage(cmd: Command, cfg: &PipelineConfig) -> CliResult<()> {
    let start = Instant::now();
    let single = |m: CliResult<Manifest>, stage: &str| finish(m?, cfg.stage_dir(stage), start);
    match cmd {
        Command::Synth => single(stages::synth(cfg), "synth"),
        Command::Ingest => single(stages::ingest(cfg), "ingest"),
        Command::Graph => single(stages::graph(cfg), "graph"),
        Command::Reduce => {
            for (dir, m) in stages::reduce(cfg)? {
                finish(m, dir, start)?;
            }
            Ok(())
        }
        Command::Features => single(stages::features(cfg), "features"),
        Command::Train => single(stages::train_stage(cfg), "train"),
        Command::Eval => single(stages::eval(cfg), "eval"),
        Command::Tune => single(stages::tune(cfg), "tune"),
        Command::Serve => single(stages::serve(cfg), "serve"),
        Command::Keys => {
            for (k, default, doc) in KEYS {
                println!("{k:<18} {:<20} {doc}", if default.is_empty() { "-" } else { default });
            }
            for (k, doc) in SYNTH_KEYS {
                println!("{k:<18} {:<20} {doc}", "");
            }
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| run_stage(cli.command, &cfg))
        }
        None => run_stage(cli.command, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
