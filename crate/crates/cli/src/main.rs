//! `pfi`: simulate → train-score → validate-score → infer → evaluate →
//! perturb, plus closed-form OU sweeps (`analyze-ou`).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    AnalyzeOuArgs, EvaluateArgs, InferArgs, PerturbArgs, SimulateArgs, TrainScoreArgs, ValidateScoreArgs,
};

#[derive(Debug, Parser)]
#[command(name = "pfi", version, about = "Probability flow inference from snapshot data")]
struct Cli {
    /// Verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Run every loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample snapshot datasets from a reaction network.
    Simulate(SimulateArgs),
    /// Fit a time-dependent score network by sliced score matching.
    TrainScore(TrainScoreArgs),
    /// Compare Langevin samples of a trained score with the data.
    ValidateScore(ValidateScoreArgs),
    /// Fit a force field through the probability flow ODE.
    Infer(InferArgs),
    /// Closed-form bias and variance sweeps for the isotropic OU process.
    AnalyzeOu(AnalyzeOuArgs),
    /// Network recovery, fixed points and marginal fit of an inferred force.
    Evaluate(EvaluateArgs),
    /// In-silico gene knockdowns.
    Perturb(PerturbArgs),
    /// Re-run a command from a JSON config or a manifest.
    Run {
        path: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate(a) => commands::simulate(a),
        Command::TrainScore(a) => commands::train_score(a),
        Command::ValidateScore(a) => commands::validate_score(a),
        Command::Infer(a) => commands::infer(a),
        Command::AnalyzeOu(a) => commands::analyze_ou(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Run { path, out } => {
            let argv = manifest::config_to_argv(&path, out.as_deref())?;
            log::info!("replaying {}", argv[1..].join(" "));
            let cli = Cli::try_parse_from(&argv)?;
            if matches!(cli.command, Command::Run { .. }) {
                anyhow::bail!("a config cannot itself be a run command");
            }
            dispatch(cli.command)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.sequential {
        pfi::par::set_sequential(true);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
