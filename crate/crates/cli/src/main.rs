//! `biglearn`: loss-surface sweeps, cooperative training runs and trajectory
//! evaluation driven by config files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Command;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "biglearn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep loss surfaces over the tailored two-mean model.
    Surface(RunArgs),
    /// Train a mixture with phase-scheduled matching tasks.
    Train(RunArgs),
    /// Recompute joint KL and mode coverage for every snapshot of a trajectory.
    Eval(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: out/<config stem>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(command: Command, args: &RunArgs) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = commands::load(&args.config, command, args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Path::new("out").join(stem)
    });
    match command {
        Command::Surface => commands::run_surface(&cfg, &out),
        Command::Train => commands::run_train(&cfg, &out),
        Command::Eval => commands::run_eval(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::Surface(a) => (Command::Surface, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
    };
    match run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("biglearn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
