mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Flags, Mode};

/// Multi-period AC optimal power flow experiments: centralized and
/// decomposed solvers, spectral partitioning and receding-horizon runs.
#[derive(Debug, Parser)]
#[command(name = "gridmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one horizon problem with every configured method
    Solve(Flags),
    /// Compute the spectral partition and affinity matrix at the reference interval
    Partition(Flags),
    /// Iteration and convergence-time table over receding-horizon steps
    Compare(Flags),
    /// Full receding-horizon runs: applied schedule, cost and ramping
    Mpc(Flags),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (mode, flags) = match &cli.command {
        Command::Solve(f) => (Mode::Solve, f),
        Command::Partition(f) => (Mode::Partition, f),
        Command::Compare(f) => (Mode::Compare, f),
        Command::Mpc(f) => (Mode::Mpc, f),
    };
    let run = ExperimentConfig::resolve(mode, flags).and_then(|cfg| match cfg.mode {
        Mode::Solve => commands::solve(cfg),
        Mode::Partition => commands::partition(cfg),
        Mode::Compare => commands::compare(cfg),
        Mode::Mpc => commands::mpc(cfg),
    });
    match run {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: at least one solve did not converge");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
