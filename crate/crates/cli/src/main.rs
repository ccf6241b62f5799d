//! `cpcl`: dataset generation, training, evaluation, ablations and reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
//! 4 experiment failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpcl_core::dataio::Fraction;
use cpcl_core::pseudo::{Branch, Strategy};
use cpcl_core::trainer::Mode;

#[derive(Parser, Debug)]
#[command(name = "cpcl", version, about = "Conservative-progressive collaborative learning on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one configuration and write its report, metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the labelled samples of a dataset directory.
    Eval(EvalArgs),
    /// Run every ablation variant and disagreement strategy on shared seeds.
    Ablate(TrainArgs),
    /// Score pseudo-labelling schemes of a trained pair against hidden ground truth.
    LabelingBench(BenchArgs),
    /// Summarise finished runs into CSV tables.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct Overrides {
    /// JSON config file: flat dotted keys or a full echoed config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    num_samples: Option<usize>,
    /// Keep labels only on this fraction of samples (1/2, 1/4, 1/8, 1/16).
    #[arg(long)]
    fraction: Option<Fraction>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    fraction: Option<Fraction>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Base seed; derives all four role seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seed_net_c: Option<u64>,
    #[arg(long)]
    seed_net_p: Option<u64>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_augment: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory holding `<name>.json` and `<name>.f64`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "conservative")]
    name: String,
    /// Second network in the same directory for the overlap ratio.
    #[arg(long)]
    other: Option<String>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Output directory of a two-branch `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint directory; defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9")]
    thresholds: Vec<f64>,
    #[arg(long, default_value = "conservative")]
    threshold_branch: Branch,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories containing `report.json`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::LabelingBench(a) => commands::labeling_bench(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
