//! `neupath` command line.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::parse_assignment;

#[derive(Parser, Debug)]
#[command(name = "neupath", version, about = "Feature inversion, pathway visualization and completion on a toy CNN")]
struct Cli {
    /// key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Any setting as key=value (repeatable).
    #[arg(short = 's', long = "set", global = true, value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Log progress to stderr (-vv for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Weights plus the whitening statistics written next to them by `train`.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Defaults to `<weights>.stats`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene dataset.
    Synth(commands::SynthArgs),
    /// Train the toy network on a dataset directory.
    Train(commands::TrainArgs),
    /// Build a patch database (feature or class database).
    BuildDb(commands::BuildDbArgs),
    /// Invert a layer's feature of an image.
    Invert(commands::InvertArgs),
    /// Visualize a class, optionally through a neural pathway.
    Classviz(commands::ClassvizArgs),
    /// Fit fc7 topics, score them and retrieve by style.
    Topics(commands::TopicsArgs),
    /// Complete a masked region with a class and topic.
    Complete(commands::CompleteArgs),
    /// Compare an estimate with a reference image.
    Eval(commands::EvalArgs),
}

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub set: Vec<(String, String)>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let g = Globals { config: cli.config, seed: cli.seed, set: cli.set };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&g, a),
        Command::Train(a) => commands::train(&g, a),
        Command::BuildDb(a) => commands::build_db(&g, a),
        Command::Invert(a) => commands::invert(&g, a),
        Command::Classviz(a) => commands::classviz(&g, a),
        Command::Topics(a) => commands::topics(&g, a),
        Command::Complete(a) => commands::complete(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                neupath::Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
