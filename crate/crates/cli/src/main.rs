//! `vqg`: synthetic corpora, training, question generation and evaluation.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod commands;
mod manifest;
mod table;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CompareArgs, EvaluateArgs, GenerateArgs, GradCheckArgs, SynthArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "vqg", version, about = "Image-conditioned question generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic annotated corpus with features
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Generate questions for one split
    Generate(GenerateArgs),
    /// Score a generation file against reference questions
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients
    GradCheck(GradCheckArgs),
    /// Tabulate several metric reports
    Compare(CompareArgs),
}

/// Failure split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Data(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<vqg_core::Error> for CliError {
    fn from(e: vqg_core::Error) -> Self {
        match e {
            vqg_core::Error::Config(_) => CliError::Usage(e.into()),
            other => CliError::Data(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("VQG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(anyhow::anyhow!("VQG_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Data(e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Compare(a) => commands::compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(err) | CliError::Data(err)) = &e;
            eprintln!("error: {err:#}");
            ExitCode::from(e.code())
        }
    }
}
