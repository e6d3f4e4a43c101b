//! `dialectid` binds the library into reproducible experiment runs:
//! build-vocab, train, predict, ensemble, analyze, stats.
//!
//! Every command is deterministic given its inputs and seed. Failures exit
//! nonzero with a machine-readable JSON error record on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, Preset};

#[derive(Parser)]
#[command(
    name = "dialectid",
    version,
    about = "Transformer dialect classifier: train, predict, ensemble, analyze"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a frequency-based WordPiece vocabulary from a TSV corpus.
    BuildVocab {
        /// TSV corpus (id, text, label).
        #[arg(long)]
        corpus: PathBuf,
        /// Total vocabulary size including the four special tokens.
        #[arg(long)]
        size: usize,
        /// Output vocab file (one token per line).
        #[arg(long)]
        out: PathBuf,
        /// Skip the first corpus line.
        #[arg(long)]
        has_header: bool,
    },
    /// Train a model per a TOML run config; flags override file values.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoint, logs, and the resolved config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// `da` (max sequence length 90) or `msa` (110).
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Score a dataset with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocab file the checkpoint was trained with.
        #[arg(long)]
        vocab: PathBuf,
        /// TSV dataset to score.
        #[arg(long)]
        input: PathBuf,
        /// Output prediction file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        has_header: bool,
        /// Encoding length; defaults to the model's max_positions.
        #[arg(long)]
        max_len: Option<usize>,
        /// Optional JSONL of per-example vertical-attention weights.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Multiply per-class probabilities across aligned prediction files.
    Ensemble {
        /// Output prediction file for the combined ensemble.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON metrics report of the combined predictions.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Two or more prediction files.
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
    /// Confusion matrix, Erlang length fits, and length histograms.
    Analyze {
        /// Prediction file to analyze.
        #[arg(long)]
        predictions: PathBuf,
        /// The TSV corpus the predictions refer to (for word lengths).
        #[arg(long)]
        corpus: PathBuf,
        /// Output JSON report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        has_header: bool,
    },
    /// Per-class counts of a TSV corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        has_header: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildVocab {
            corpus,
            size,
            out,
            has_header,
        } => commands::build_vocab(&corpus, size, &out, has_header),
        Command::Train {
            config,
            out_dir,
            seed,
            max_steps,
            preset,
        } => commands::train(
            &config,
            Overrides {
                preset,
                seed,
                max_steps,
                out_dir,
            },
        ),
        Command::Predict {
            checkpoint,
            vocab,
            input,
            out,
            has_header,
            max_len,
            diagnostics,
        } => commands::predict(
            &checkpoint,
            &vocab,
            &input,
            &out,
            has_header,
            max_len,
            diagnostics.as_deref(),
        ),
        Command::Ensemble { out, report, files } => {
            commands::ensemble(&files, &out, report.as_deref())
        }
        Command::Analyze {
            predictions,
            corpus,
            out,
            has_header,
        } => commands::analyze(&predictions, &corpus, &out, has_header),
        Command::Stats { corpus, has_header } => commands::stats(&corpus, has_header),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": format!("{:#}", e) });
            eprintln!("{}", record);
            ExitCode::FAILURE
        }
    }
}
