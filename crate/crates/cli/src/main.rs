//! `lgbm`: synthesize data, train, detect, evaluate, ensemble, and plot.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config with optional sections synth, model, train, localize, detect, eval, ensemble.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split; writes the JSONL log and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run localization on one split and write a results JSON.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, or test. Overrides detect.split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads. Overrides detect.workers.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a results JSON against an annotation file.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Annotation subset, or "all". Overrides eval.subset.
        #[arg(long)]
        subset: Option<String>,
    },
    /// Fuse several results JSON files into one.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// One weight per input. Overrides ensemble.weights.
        #[arg(long, num_args = 1..)]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        nms_threshold: Option<f64>,
    },
    /// Render one video's activation curves, attention, and ground truth to PNG.
    PlotCas {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory holding the video.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "lgbm",
    version,
    about = "Weakly-supervised temporal action localization"
)]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Cli { cfg, command } = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let err = CliError::Config(format!("arguments: {first}"));
            eprintln!("{}", err.to_line());
            return err.exit_code();
        }
    };
    let result = match command {
        Command::Synth { out, seed } => commands::synth(&cfg, &out, seed),
        Command::Train { data, out, seed } => commands::train(&cfg, &data, &out, seed),
        Command::Detect {
            ckpt,
            data,
            split,
            out,
            workers,
        } => commands::detect(&cfg, &ckpt, &data, split, &out, workers),
        Command::Eval {
            results,
            gt,
            out,
            subset,
        } => commands::eval(&cfg, &results, &gt, out.as_deref(), subset),
        Command::Ensemble {
            inputs,
            out,
            weights,
            nms_threshold,
        } => commands::ensemble(&cfg, &inputs, &out, weights, nms_threshold),
        Command::PlotCas {
            ckpt,
            data,
            video,
            out,
        } => commands::plot_cas(&cfg, &ckpt, &data, &video, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            e.exit_code()
        }
    }
}
