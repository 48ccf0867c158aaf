use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Aspect-controllable product summarization pipeline.
#[derive(Parser)]
#[command(name = "extsumm", version)]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Top-level seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config value by dotted key, e.g. `train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, filter and cluster writer summaries of `paths.products`.
    BuildCorpus,
    /// Generate a synthetic corpus with known aspect structure.
    Synth,
    /// Add overlap rates and extractor labels to every split file.
    Label,
    /// Train on the labeled train split, selecting by dev perplexity.
    Train,
    /// Decode `split` with the checkpoint.
    Generate,
    /// Score generations against `split`.
    Evaluate,
    /// Export extractor scores of one instance as CSV.
    Heatmap,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed).and_then(|cfg| match cli.command {
        Command::BuildCorpus => commands::build_corpus(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::Label => commands::label(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::Evaluate => commands::evaluate_cmd(&cfg),
        Command::Heatmap => commands::heatmap(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
