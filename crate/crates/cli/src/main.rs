mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{AblateArgs, ConvertArgs, CsbmArgs, EnergyArgs, SolversArgs, StatsArgs};
use config::Overrides;

/// Convection-diffusion graph dynamics: training and analysis runs.
#[derive(Parser, Debug)]
#[command(name = "gnsn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train over the configured splits and seeds.
    Train(Overrides),
    /// Generate a contextual stochastic block model graph.
    Csbm(CsbmArgs),
    /// Dirichlet energy along fixed-step trajectories of untrained models.
    Energy(EnergyArgs),
    /// Compare dynamics variants or encodings.
    Ablate(AblateArgs),
    /// Compare solvers across step sizes.
    Solvers(SolversArgs),
    /// Velocity report of a trained snapshot.
    Stats(StatsArgs),
    /// Convert an edge list plus feature CSV to canonical JSON.
    Convert(ConvertArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(o) => commands::cmd_train(o),
        Command::Csbm(a) => commands::cmd_csbm(a),
        Command::Energy(a) => commands::cmd_energy(a),
        Command::Ablate(a) => commands::cmd_ablate(a),
        Command::Solvers(a) => commands::cmd_solvers(a),
        Command::Stats(a) => commands::cmd_stats(a),
        Command::Convert(a) => commands::cmd_convert(a),
    };
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = if e.is_input_error() { ("input", 2) } else { ("runtime", 1) };
            eprintln!("{}", json!({ "error": { "kind": kind, "code": code, "message": e.to_string() } }));
            ExitCode::from(code)
        }
    }
}
