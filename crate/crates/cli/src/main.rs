//! `hyperx`: pretrain a backbone, train a system under a regime, evaluate
//! runs, sweep few-shot fine-tuning and join runs into reports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hyperx::HxError;

#[derive(Parser)]
#[command(name = "hyperx", version, about = "Hypernetwork adapters for zero-shot cross-lingual transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone with MLM on the seen languages.
    Pretrain {
        config: PathBuf,
        /// Checkpoint directory (default: {output.dir}/{output.name}-backbone).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one system under one regime.
    Train {
        config: PathBuf,
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        partition: Option<String>,
        #[arg(long)]
        task: Option<String>,
        /// Backbone checkpoint (default: {output.dir}/{output.name}-backbone).
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Run name under the output directory.
        #[arg(long)]
        name: Option<String>,
    },
    /// Re-evaluate trained runs from their best checkpoints.
    Eval {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Few-shot fine-tuning from a trained run, one run directory per (pair, k).
    Fewshot {
        run: PathBuf,
        /// Comma-separated languages (default: the languages held out from pretraining).
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// Sample counts (default from the config; shots per label with --new-labels).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Merge entity types and train only a new output head.
        #[arg(long)]
        new_labels: bool,
    },
    /// Join runs into comparison tables and error-reduction rates.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Column label (or system name) to compute error reduction against.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Also write the outputs into this new directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &HxError) -> u8 {
    match e {
        HxError::Config(_) | HxError::Usage(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out } => commands::pretrain(&config, out),
        Command::Train { config, system, regime, partition, task, backbone, name } => {
            commands::train(&config, commands::Overrides { system, regime, partition, task }, backbone, name)
        }
        Command::Eval { runs, format } => commands::eval(&runs, format),
        Command::Fewshot { run, languages, tasks, k, new_labels } => commands::fewshot(&run, languages, tasks, k, new_labels),
        Command::Report { runs, baseline, format, out } => commands::report(&runs, baseline.as_deref(), format, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
