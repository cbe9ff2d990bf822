//! `roadattr`: generate synthetic data, train both stages, evaluate and
//! analyse prediction streams.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime and numeric failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Error caused by invalid user input; maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "roadattr", version, about = "Per-segment road attribute recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel inference.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the local multi-task model and write its prediction stream.
    TrainLocal {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ce | ifw | recall-mt
        #[arg(long)]
        loss: Option<String>,
        /// single | multi
        #[arg(long)]
        frames: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train per-attribute sequential enhancers on a local prediction stream.
    TrainSeq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Local prediction stream (JSON lines).
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate prediction streams or trained runs on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// NAME=PATH of a prediction stream; repeatable.
        #[arg(long = "stream")]
        streams: Vec<String>,
        /// NAME=RUN_DIR of a trained run; repeatable.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
        /// Attribute left out of an additional mean; repeatable.
        #[arg(long)]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporal diagnostics of a prediction stream.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Prediction stream to analyse.
        #[arg(long)]
        pred: PathBuf,
        /// Reference stream; ground-truth labels of the dataset when omitted.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Restrict to one split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<roadattr_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common, out } => commands::generate(&common, &out),
        Command::TrainLocal {
            common,
            dataset,
            out,
            loss,
            frames,
            epochs,
        } => commands::train_local(&common, &dataset, &out, loss.as_deref(), frames.as_deref(), epochs),
        Command::TrainSeq {
            common,
            dataset,
            stream,
            out,
            loss,
            epochs,
        } => commands::train_seq(&common, &dataset, &stream, &out, loss.as_deref(), epochs),
        Command::Eval {
            common,
            dataset,
            split,
            streams,
            checkpoints,
            exclude,
            out,
        } => commands::eval(&common, &dataset, &split, &streams, &checkpoints, &exclude, &out),
        Command::Analyze {
            common,
            dataset,
            pred,
            gt,
            split,
            out,
        } => commands::analyze(&common, &dataset, &pred, gt.as_deref(), split.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
