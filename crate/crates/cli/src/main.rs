//! `adet`: embed, train, eval and bench from one JSON run description.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "adet",
    version,
    about = "Image-level anomaly detection pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run description; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config leaf, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write a seeded random encoder container.
    InitEncoder,
    /// Encode every dataset image and cache the embeddings.
    Embed,
    /// Train the scoring head on the train split.
    Train,
    /// Score the eval split and write per-category AUROC.
    Eval,
    /// Time single-image inference and report parameter counts.
    Bench,
}

fn run(cli: &Cli) -> error::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.out.as_deref())?;
    match cli.command {
        Command::InitEncoder => commands::init_encoder(&cfg).map(drop),
        Command::Embed => commands::embed(&cfg).map(drop),
        Command::Train => commands::train(&cfg).map(drop),
        Command::Eval => commands::eval(&cfg).map(drop),
        Command::Bench => commands::bench(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_kind() as u8)
        }
    }
}
