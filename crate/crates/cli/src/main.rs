//! `segdecide`: batch front-end for the decision-rule toolkit.
//!
//! Subcommands mirror the pipeline stages: `priors` estimates and smooths
//! pixel-wise class priors from labels, `decide` applies a decision rule
//! to probability maps, `eval` scores predictions against ground truth,
//! `analyze` compares the two rules at corpus level, `synth` generates
//! synthetic scenes, and `experiment` runs the whole pipeline on a fresh
//! synthetic corpus and writes a report with per-property verdicts.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 a
//! verdict failed under `experiment --check`.

mod commands;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "segdecide", version, about = "Bayes vs maximum-likelihood decision rules for semantic segmentation")]
struct Cli {
    /// Worker threads for parallel stages (default: available cores).
    /// Results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate pixel-wise priors from a directory of label maps, smooth
    /// them, and write the smoothed stack.
    Priors(PriorsArgs),
    /// Apply a decision rule to one or more probability maps (several
    /// maps are averaged elementwise first).
    Decide(DecideArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Corpus-level comparison of two rules' predictions: CDFs,
    /// histograms, heatmaps.
    Analyze(AnalyzeArgs),
    /// Generate synthetic scenes.
    Synth(SynthArgs),
    /// Run the full synthetic experiment and write the report.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct PriorsArgs {
    /// Directory holding ground-truth label maps (*.sgt), read in

    /// filename order.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    num_classes: usize,
    /// JSON file with keys sigma, cutoff, kernel_radius_sigmas.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gaussian standard deviation in pixels (overrides --config).
    #[arg(long)]
    sigma: Option<f64>,
    /// Lower floor applied to smoothed priors (overrides --config).
    #[arg(long)]
    cutoff: Option<f64>,
    /// Kernel truncation radius in sigmas (overrides --config).
    #[arg(long)]
    kernel_radius_sigmas: Option<f64>,
    /// Output path of the smoothed prior stack.
    #[arg(long)]
    out: PathBuf,
    /// Optional output of the raw (unsmoothed) stack.
    #[arg(long)]
    raw_out: Option<PathBuf>,
    /// Optional output of the global priors as JSON.
    #[arg(long)]
    global_out: Option<PathBuf>,
}

#[derive(Args)]
struct DecideArgs {
    /// Probability map(s); several are averaged before deciding.
    #[arg(long, num_args = 1.., required = true)]
    probs: Vec<PathBuf>,
    /// bayes or ml.
    #[arg(long)]
    rule: String,
    /// Pixel-wise prior stack for the ml rule.
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Global priors JSON for the ml rule.
    #[arg(long)]
    global_priors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label map file, or directory of *.sgt files.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label map file or directory; directories are paired
    /// with predictions in filename order.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    num_classes: usize,
    #[arg(long, default_value_t = 8)]
    connectivity: u8,
    #[arg(long, default_value_t = 10)]
    min_size: usize,
    #[arg(long, default_value_t = 10)]
    max_gap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Directory of label maps predicted with the Bayes rule.
    #[arg(long)]
    pred_bayes: PathBuf,
    /// Directory of label maps predicted with the ML rule.
    #[arg(long)]
    pred_ml: PathBuf,
    /// Directory of ground-truth label maps.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    num_classes: usize,
    /// Class whose detection behavior is analyzed.
    #[arg(long)]
    class: u8,
    #[arg(long, default_value_t = 8)]
    connectivity: u8,
    #[arg(long, default_value_t = 10)]
    min_size: usize,
    #[arg(long, default_value_t = 10)]
    max_gap: usize,
    /// Comma-separated histogram bin edges, e.g. "10,16,32,64".
    #[arg(long)]
    bin_edges: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene model JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Number of scenes to generate.
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "scene")]
    prefix: String,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "experiment_out")]
    out_dir: PathBuf,
    /// Exit with code 3 unless every verdict in the report passes.
    #[arg(long)]
    check: bool,
}

/// Error carrying the intended exit code.
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
    CheckFailed,
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    if let Some(threads) = cli.threads {
        // Ignore the error when a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let result = match cli.command {
        Command::Priors(args) => commands::priors(args),
        Command::Decide(args) => commands::decide(args),
        Command::Eval(args) => commands::eval(args),
        Command::Analyze(args) => commands::analyze(args),
        Command::Synth(args) => commands::synth(args),
        Command::Experiment(args) => commands::experiment(args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
        Err(CliError::CheckFailed) => {
            eprintln!("experiment check failed: see report verdicts");
            ExitCode::from(3)
        }
    }
}
