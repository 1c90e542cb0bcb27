//! `drm`: one verb per pipeline stage, from synthetic worlds to reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use drm_core::adapt::{AdaptConfig, NormMode};
use drm_core::dataio::Split;
use drm_core::heads::{Init, RandomDist};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "drm",
    version,
    about = "Decomposed reward models over preference embeddings"
)]
pub struct Cli {
    /// Root seed; every random draw comes from a named substream of it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for accumulation and evaluation.
    #[arg(long, global = true, env = "DRM_THREADS")]
    pub threads: Option<usize>,

    /// JSON file of flag values; the command line overrides it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world with known attribute directions.
    Gen(GenArgs),
    /// Convert a pair-mode file into a diff-mode file.
    Convert(ConvertArgs),
    /// Principal decomposition into a sign-paired head bank.
    Pca(PcaArgs),
    /// Train a single Bradley-Terry head.
    TrainSingle(TrainArgs),
    /// Draw a bank of random unit heads.
    RandomHeads(RandomArgs),
    /// Adapt a head bank to a handful of labelled records.
    Adapt(AdaptArgs),
    /// Repeated-sampling adaptation protocol.
    Eval(EvalArgs),
    /// Accuracy of every head on every attribute.
    PerHead(PerHeadArgs),
    /// Sweep adaptation set sizes and head counts.
    Ablate(AblateArgs),
    /// Variance, weight, correlation and score-distribution tables.
    Analyze(AnalyzeArgs),
    /// Print a file header as JSON.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Convert(_) => "convert",
            Command::Pca(_) => "pca",
            Command::TrainSingle(_) => "train-single",
            Command::RandomHeads(_) => "random-heads",
            Command::Adapt(_) => "adapt",
            Command::Eval(_) => "eval",
            Command::PerHead(_) => "per-head",
            Command::Ablate(_) => "ablate",
            Command::Analyze(_) => "analyze",
            Command::Inspect(_) => "inspect",
        }
    }
}

/// Parses a lowercase enum name through its serde representation.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_enum(s)
}

fn parse_norm_mode(s: &str) -> Result<NormMode, String> {
    serde_enum(s)
}

fn parse_init(s: &str) -> Result<Init, String> {
    serde_enum(s)
}

fn parse_dist(s: &str) -> Result<RandomDist, String> {
    serde_enum(s)
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Number of attributes.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Records per attribute.
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    /// Per-attribute direction scales; defaults to K, K−1, …, 1.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Isotropic noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Label sharpness; larger values flip fewer labels.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DataSelection {
    /// Keep only records of this split (train, adapt, test).
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
}

#[derive(Debug, Args, Serialize)]
pub struct PcaArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Distinct eigenvectors kept; the bank holds twice as many heads.
    #[arg(long, default_value_t = 50)]
    pub heads: usize,
    /// Records per accumulation chunk.
    #[arg(long, default_value_t = 4096)]
    pub chunk: usize,
    /// Use the raw second moment instead of the covariance.
    #[arg(long)]
    pub no_center: bool,
    /// Keep eigensolver orientations instead of calibrating on the data.
    #[arg(long)]
    pub no_calibrate: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    /// Initial weights: zeros or gaussian.
    #[arg(long, default_value = "zeros", value_parser = parse_init)]
    pub init: Init,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RandomArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Entry distribution before normalization: uniform or gaussian.
    #[arg(long, default_value = "gaussian", value_parser = parse_dist)]
    pub dist: RandomDist,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AdaptFlags {
    /// Softmax temperature over per-head losses.
    #[arg(long, default_value_t = AdaptConfig::default().temperature)]
    pub temperature: f64,
    /// Floor for normalization scales.
    #[arg(long, default_value_t = AdaptConfig::default().epsilon)]
    pub epsilon: f64,
    /// Adaptation-set normalization: unit_norm, scale_only or z_score.
    #[arg(long, default_value = "unit_norm", value_parser = parse_norm_mode)]
    pub norm_mode: NormMode,
}

impl AdaptFlags {
    pub fn config(&self) -> AdaptConfig {
        AdaptConfig {
            epsilon: self.epsilon,
            temperature: self.temperature,
            norm_mode: self.norm_mode,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AdaptArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Adapt on this attribute only.
    #[arg(long)]
    pub attribute: Option<String>,
    /// Sample this many records for adaptation and score the rest.
    #[arg(long)]
    pub n_adapt: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub adapt: AdaptFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n_adapt: usize,
    /// Repeated adaptation samplings per attribute.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Credit given to a zero margin.
    #[arg(long, default_value_t = 0.5)]
    pub tie: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub adapt: AdaptFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-seed table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PerHeadArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Heads reported, from the front of the bank.
    #[arg(long, default_value_t = 100)]
    pub top: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tie: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10,15,20")]
    pub n_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100")]
    pub h_values: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tie: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub adapt: AdaptFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n_adapt: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub adapt: AdaptFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: DataSelection,
    /// Output directory for the CSV tables and summary.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let argv = match config::merge_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let matches = Cli::command().get_matches_from(argv);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
