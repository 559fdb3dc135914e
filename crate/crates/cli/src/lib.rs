//! Command-line driver: shot ingest, basis construction, simulation, model
//! fitting, posterior summaries, evaluation and plot data.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plotdata;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const SUBCOMMANDS: [&str; 8] = ["counts", "basis", "simulate", "fit", "summarize", "eval", "plotdata", "pipeline"];

#[derive(Debug, Parser)]
#[command(name = "mfmzip", version, about = "Cluster shot charts with a zero-inflated Poisson mixture of finite mixtures")]
pub struct Cli {
    /// Worker threads for parallel chains, replicates and per-player fits.
    #[arg(long, global = true, env = "MFMZIP_WORKERS")]
    pub workers: Option<usize>,
    /// Flat `key = value` file of flags, applied before the command line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin a shot file into per-player block counts.
    Counts(CountsArgs),
    /// Build NMF basis surfaces and the design matrix from a shot file.
    Basis(BasisArgs),
    /// Generate synthetic replicates with known groups.
    Simulate(SimulateArgs),
    /// Run the MCMC sampler.
    Fit(FitArgs),
    /// Representative partition, estimates and HPD intervals from a trace.
    Summarize(SummarizeArgs),
    /// Rand index of predicted partitions against the truth.
    Eval(EvalArgs),
    /// Long-format grid dumps for plotting.
    Plotdata(PlotArgs),
    /// Staged end-to-end run with a reproducibility manifest.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    /// Reflect full-court coordinates onto the offensive half court.
    #[arg(long)]
    pub reflect: bool,
    /// Drop players with fewer attempts.
    #[arg(long, default_value_t = 0)]
    pub min_attempts: usize,
    /// Comma-separated player ids to drop.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct CountsArgs {
    #[arg(long)]
    pub shots: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the compact binary format instead of CSV.
    #[arg(long)]
    pub binary: bool,
    /// Also write blocks per count bucket for every player.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[command(flatten)]
    pub ingest: IngestArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NmfArgs {
    #[arg(long, default_value_t = mfmzip::basis::DEFAULT_RANK)]
    pub rank: usize,
    /// Gaussian kernel bandwidth in feet.
    #[arg(long, default_value_t = mfmzip::basis::DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct BasisArgs {
    #[arg(long)]
    pub shots: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub nmf: NmfArgs,
    #[command(flatten)]
    pub ingest: IngestArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SimType {
    Balanced,
    Imbalanced,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SimScale {
    Full,
    Desk,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    #[arg(long = "type", value_enum, default_value_t = SimType::Balanced)]
    pub kind: SimType,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, value_enum, default_value_t = SimScale::Desk)]
    pub scale: SimScale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Design matrix to simulate on; a synthetic one is generated otherwise.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KPriorArg {
    Truncated,
    Shifted,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Singletons,
    OneCluster,
    Prior,
}

/// Sampler settings shared by `fit` and `pipeline`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 15_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 5_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// Poisson rate of the prior on the number of components.
    #[arg(long, default_value_t = 1.0)]
    pub psi: f64,
    /// Place a Gamma(1, 1) prior on psi and update it.
    #[arg(long)]
    pub psi_gamma_prior: bool,
    /// Prior standard deviation of every regression coefficient.
    #[arg(long, default_value_t = 5.0)]
    pub sigma0: f64,
    #[arg(long, value_enum, default_value_t = KPriorArg::Shifted)]
    pub kprior: KPriorArg,
    /// Auxiliary components per label update.
    #[arg(long, default_value_t = 2)]
    pub m_aux: usize,
    /// Initial random-walk step (one value, or one per coefficient).
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    pub rw_step: Vec<f64>,
    /// Keep the random-walk steps fixed during burn-in.
    #[arg(long)]
    pub no_adapt: bool,
    #[arg(long, value_enum, default_value_t = InitArg::Singletons)]
    pub init: InitArg,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct FitArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub design: PathBuf,
    /// Trace file (NDJSON); with several chains, `_chainN` is added to the stem.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Count matrix supplying player ids; players are numbered otherwise.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// HPD credible level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureArg {
    ZipMle,
    NmfWeights,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// `player_id,cluster` file with the true groups.
    #[arg(long)]
    pub truth: PathBuf,
    /// Predicted partition as `name=path`; repeatable.
    #[arg(long = "pred")]
    pub preds: Vec<String>,
    /// Also score k-means and mean shift on features of these counts.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FeatureArg::ZipMle)]
    pub features: FeatureArg,
    /// Basis surfaces for `--features nmf-weights`.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Clusters for k-means; defaults to the count of the first prediction.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the table is printed either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Counts,
    Partition,
    Basis,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Counts, partition or basis file, according to `--kind`.
    #[arg(long)]
    pub input: PathBuf,
    /// Count matrix for `--kind partition`.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Single player for `--kind counts`.
    #[arg(long)]
    pub player: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct PipelineArgs {
    /// Shot file for the real-data workflow.
    #[arg(long, conflicts_with = "simulate")]
    pub shots: Option<PathBuf>,
    /// Separate shot file for the basis; defaults to `--shots`.
    #[arg(long)]
    pub basis_shots: Option<PathBuf>,
    /// Run the simulation workflow instead.
    #[arg(long)]
    pub simulate: bool,
    #[arg(long = "type", value_enum, default_value_t = SimType::Balanced)]
    pub kind: SimType,
    #[arg(long, value_enum, default_value_t = SimScale::Desk)]
    pub scale: SimScale,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub nmf: NmfArgs,
    #[command(flatten)]
    pub ingest: IngestArgs,
}

/// Parses `args` (including the program name), runs the command and maps
/// failures to exit codes: 1 for numerical failures, 2 for I/O and
/// configuration errors.
pub fn main_with_args(args: Vec<OsString>) -> ExitCode {
    let args = match config::expand(args, &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| c.downcast_ref::<mfmzip::Error>().is_some_and(mfmzip::Error::is_numeric));
    if numeric {
        1
    } else {
        2
    }
}
