//! `rwde <experiment> [--config FILE] [--seed N] [--threads N] [--out DIR]`
//!
//! Exit status: 0 when every verdict passes, 2 on a statistical failure,
//! 1 on usage or configuration errors.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use rwde::harness::{run, Experiment, ExperimentConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    T1Tail,
    Fluctuations,
    TrapTail,
    GreenMoments,
    ReversalTest,
    Velocity,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::T1Tail => Experiment::T1Tail,
            Command::Fluctuations => Experiment::Fluctuations,
            Command::TrapTail => Experiment::TrapTail,
            Command::GreenMoments => Experiment::GreenMoments,
            Command::ReversalTest => Experiment::ReversalTest,
            Command::Velocity => Experiment::Velocity,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rwde", version, about = "Monte Carlo experiments for random walks in Dirichlet environments")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; canonical defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::canonical(0),
    };
    if let Some(s) = cli.seed {
        config.master_seed = s;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    let start = Instant::now();
    let rs = run(cli.command.into(), &config)?;
    rs.write(&cli.out, start.elapsed().as_secs_f64()).with_context(|| format!("writing results to {}", cli.out.display()))?;
    // A closed stdout must not turn a finished run into a panic.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", rs.report());
    for n in &rs.notes {
        let _ = writeln!(out, "note: {n}");
    }
    Ok(rs.pass())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
