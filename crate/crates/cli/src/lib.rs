//! The `ltsa` command line: simulate cohorts, train, evaluate, compare,
//! inspect attention and render static plots.

pub mod commands;
pub mod config;
pub mod plot;
pub mod source;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ltsa::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ltsa", version, about = "Longitudinal survival analysis over image sequences")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Global {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file with optional `cohort`, `train`, `grid`, `n_boot` and `split` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort and write it as a dataset directory.
    Simulate(SimulateArgs),
    /// Train a model on the train split, early-stopping on the val split.
    Train(TrainArgs),
    /// Time-dependent concordance and Brier score with bootstrap intervals.
    Evaluate(EvaluateArgs),
    /// Evaluate two models and test whether the first beats the second.
    Compare(CompareArgs),
    /// Normalised attention per visit and its dependence on visit offset.
    Attention(AttentionArgs),
    /// Render SVG figures from reports or model forecasts.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Six-monthly visits, 87.8% censoring.
    Areds,
    /// Yearly visits, doubled drift.
    Ohts,
    /// 100 patients of the areds preset.
    Smoke,
    /// Nobody ever has an event.
    ZeroHazard,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "areds")]
    pub preset: Preset,
    /// Number of patients; the preset decides when omitted.
    #[arg(long)]
    pub patients: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Ltsa,
    Baseline,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "ltsa")]
    pub kind: Kind,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Override the maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue the run stored in this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct EvalOptions {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Which patient split to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Bootstrap resamples per cell (0 disables intervals).
    #[arg(long)]
    pub boot: Option<usize>,
    /// Prediction times in years, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    /// Horizons in years, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory, or one of `oracle`, `anti-oracle`, `random`.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub eval: EvalOptions,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Model expected to be better.
    #[arg(long)]
    pub a: String,
    /// Reference model.
    #[arg(long)]
    pub b: String,
    #[command(flatten)]
    pub eval: EvalOptions,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    /// Checkpoint directory of an ltsa model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(subcommand)]
    pub what: PlotKind,
}

#[derive(Debug, Subcommand)]
pub enum PlotKind {
    /// Box plots of bootstrap samples per (t, dt) cell and model.
    Box {
        /// `samples.csv` from `evaluate` or `compare`.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value = "concordance")]
        metric: String,
    },
    /// Predicted survival curves at each eye's latest visit.
    Curves {
        /// Model source, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Eye as `patient:eye`, repeatable.
        #[arg(long = "eye", required = true)]
        eyes: Vec<String>,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Contract(_) => 2,
        Error::Numerical(_) | Error::DegenerateConditioning(_) => 4,
        Error::Data(_) | Error::Shape { .. } | Error::Io { .. } | Error::Csv(_) | Error::Json(_) => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => commands::simulate(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Compare(a) => commands::compare(g, a),
        Command::Attention(a) => commands::attention(g, a),
        Command::Plot(a) => commands::plot(g, a),
    }
}
