//! `weaklayout` command-line pipeline.
//!
//! Exit codes: 0 on success, 1 when input fails validation (including bad
//! arguments), 2 on filesystem errors.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "weaklayout", version, about = "Weakly supervised token labeling for document layouts")]
pub struct Cli {
    /// Root seed for splits, shuffling and generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Flat `key = value` training config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Suppress progress and summary lines.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a corpus and write it back in normalized form.
    Ingest {
        corpus: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Apply an LF suite to a corpus and write the label matrix.
    LfApply {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lfs: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Coverage, overlap, conflict and (with gold) precision per LF.
    LfReport {
        #[arg(long)]
        matrix: PathBuf,
        /// Corpus carrying gold labels for the matrix rows.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the feature and label models; writes a model bundle directory.
    Train(TrainArgs),
    /// Predict token classes with a trained bundle.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Which rows to predict: all, labeled, unlabeled, validation or test
        /// (from the bundle's split).
        #[arg(long, default_value = "all")]
        part: String,
        /// Average in the label-model posterior where some LF fires.
        #[arg(long)]
        fuse: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score predictions against gold labels.
    Eval {
        /// Corpus or predictions file holding the reference labels.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Second predictions file; the delta table reports `pred - baseline`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Classes left out of the masked macro-F1.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with a calibrated LF suite.
    Synth(SynthArgs),
    /// Supervised-only vs joint training over labeled/unlabeled fractions.
    Sweep {
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        overrides: Overrides,
        /// Labeled fractions of the training pool, comma separated.
        #[arg(long)]
        labeled: Option<String>,
        /// Unlabeled fractions of the training pool, comma separated.
        #[arg(long)]
        unlabeled: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        validation: Option<f64>,
        #[arg(long)]
        test: Option<f64>,
    },
    /// ingest, lf-apply, lf-report, train, predict and eval in one process.
    RunAll {
        #[arg(long, required_unless_present = "synth")]
        corpus: Option<PathBuf>,
        #[arg(long, required_unless_present = "synth")]
        lfs: Option<PathBuf>,
        /// Generate the corpus and suite instead of reading them.
        #[arg(long, conflicts_with_all = ["corpus", "lfs"])]
        synth: bool,
        #[command(flatten)]
        synth_args: SynthArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        supervised_only: bool,
        /// Also train the supervised-only baseline and report the delta.
        #[arg(long)]
        compare_baseline: bool,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Training config override `key=value`; may repeat. Wins over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Split manifest to reuse instead of drawing a new split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub labeled: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub lfs: PathBuf,
    /// Precomputed label matrix; rebuilt from the suite when absent.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Turn off the label-model, agreement and guide terms.
    #[arg(long)]
    pub supervised_only: bool,
    /// Bundle directory (default `<out-dir>/model`).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SynthArgs {
    /// Flat `key = value` generator spec file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Generator override `key=value`; may repeat.
    #[arg(long = "spec-set", value_name = "KEY=VALUE")]
    pub spec_set: Vec<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<weaklayout::Error>() {
            if e.is_io() {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
