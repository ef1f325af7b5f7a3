use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ebosal::config::{parse_config, Overrides};
use ebosal::runner::{cmd_ablate, cmd_run, cmd_sweep, RunOptions};

/// Energy-based open-set active learning experiments.
#[derive(Parser)]
#[command(name = "ebosal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (method, seed) pair and write CSV/plot data.
    Run(CommonArgs),
    /// Compare all five methods on one task (final-cycle table).
    Ablate(CommonArgs),
    /// Sweep the margin grid with the full pipeline.
    Sweep(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config value).
    #[arg(long)]
    out: Option<String>,

    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Replace the config's method list with this single method.
    #[arg(long)]
    method: Option<String>,

    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,

    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn execute(
    args: &CommonArgs,
    f: impl Fn(&ebosal::config::ExperimentConfig, &RunOptions) -> ebosal::Result<()>,
) -> ebosal::Result<()> {
    let overrides = Overrides {
        seed: args.seed,
        method: args.method.clone(),
        out: args.out.clone(),
    };
    let cfg = parse_config(args.config.as_deref(), &overrides)?;
    let opts = RunOptions {
        force: args.force,
        jobs: args.jobs,
    };
    f(&cfg, &opts)
}

fn dispatch(command: &Command) -> ebosal::Result<()> {
    match command {
        Command::Run(args) => execute(args, cmd_run),
        Command::Ablate(args) => execute(args, cmd_ablate),
        Command::Sweep(args) => execute(args, cmd_sweep),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
