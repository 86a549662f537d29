//! `loanstate` batch driver: each subcommand reads one JSON config, works
//! inside the `--out` directory and records a manifest of what it wrote.

mod commands;
mod context;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use context::{Ctx, Failure};

#[derive(Parser)]
#[command(name = "loanstate", version, about = "Loan-state transition models: synthesize, train, explain, simulate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Omit wall-clock fields from artifacts so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Working directory holding inputs and artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Generate a synthetic loan panel from a known transition function.
    Synth,
    /// Encode, split and normalize panel CSVs into dataset caches.
    Prepare,
    /// Fit a network, a grid of networks or an ensemble.
    Train,
    /// Test loss, likelihood-ratio test and transition AUCs.
    Eval,
    /// Average absolute sensitivities and leave-one-out losses.
    Sensitivity,
    /// Pairwise and triple interaction scans.
    Interact,
    /// Partial-dependence tables.
    Pdp,
    /// Pool-level Monte Carlo and closed-form count distributions.
    Simulate,
    /// Portfolio selection curves and losses.
    Portfolio,
    /// Summarize the manifests in the output directory.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sensitivity => "sensitivity",
            Command::Interact => "interact",
            Command::Pdp => "pdp",
            Command::Simulate => "simulate",
            Command::Portfolio => "portfolio",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::Config("--jobs: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    let ctx = Ctx::new(cli.command.name(), cli.out, cli.config, cli.seed, cli.deterministic, cli.jobs)?;
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Prepare => commands::prepare(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Sensitivity => commands::sensitivity(&ctx),
        Command::Interact => commands::interact(&ctx),
        Command::Pdp => commands::pdp(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Portfolio => commands::portfolio(&ctx),
        Command::Report => report::report(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
