use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tdbem_cli::{resolve_workers, run, CliError, Command, RunConfig, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "tdbem", version, about = "Space-time Galerkin BEM for the wave equation with Neumann data")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Worker count; overrides TDBEM_WORKERS and the config file.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Error study against the analytic sphere solution.
    Convergence(Common),
    /// Iteration counts of several solvers on identical systems.
    Bench(Common),
    /// Single solve with optional field export.
    Solve(Common),
}

fn load(command: Command, c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(command, &c.config)?;
    let env = std::env::var(WORKERS_ENV).ok();
    cfg.workers = resolve_workers(c.workers, env.as_deref(), cfg.workers)?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common) = match &cli.command {
        Sub::Convergence(c) => (Command::Convergence, c),
        Sub::Bench(c) => (Command::Bench, c),
        Sub::Solve(c) => (Command::Solve, c),
    };
    match load(command, common).and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
