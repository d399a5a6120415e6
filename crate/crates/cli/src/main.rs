mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dgcnet", version, about = "Dynamic group convolution 3D DenseNet for hyperspectral patches")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for synthesis, initialization, shuffling and (by default) splitting
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Record that bit-for-bit reproducibility is required (training is
    /// always deterministic; the flag is kept in the manifest)
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Training runs executed concurrently
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Directory for every output file
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

impl Global {
    pub fn threads(&self) -> usize {
        self.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled cube
    Synth(SynthArgs),
    /// Convert a raw cube with a sidecar header to HSIC
    Convert(ConvertArgs),
    /// Train `train.runs` models and keep each run's best checkpoint
    Train(ConfigArgs),
    /// Evaluate checkpoints (as an ensemble) on one split
    Eval(EvalArgs),
    /// Multiply-accumulate cost per layer, dense versus pruned
    Macs(CostArgs),
    /// Parameter counts per layer and module
    Params(CostArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Raster rows
    #[arg(long = "m", visible_alias = "rows")]
    pub rows: usize,
    /// Raster columns
    #[arg(long = "n", visible_alias = "cols")]
    pub cols: usize,
    /// Spectral bands
    #[arg(long = "l", visible_alias = "bands")]
    pub bands: usize,
    /// Classes (at least 2)
    #[arg(long = "k", visible_alias = "classes")]
    pub classes: usize,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Output file, relative to --out-dir
    #[arg(long, default_value = "synth.hsic")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Sidecar header describing the raw data and label files
    #[arg(long)]
    pub header: PathBuf,
    /// Output file, relative to --out-dir
    #[arg(long, default_value = "cube.hsic")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// JSON config, or a manifest from an earlier command
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSON config, or the train manifest
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoints to ensemble; defaults to every run's checkpoint in --out-dir
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct CostSource {
    /// JSON config
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// DGCN checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[command(flatten)]
    pub source: CostSource,
    /// Pruning rate; defaults to the target 1 - gate_factor
    #[arg(long)]
    pub eps: Option<f64>,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Failure while doing the work; exit code 1.
    Runtime(String),
}

impl From<dgcnet::Error> for CliError {
    fn from(e: dgcnet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let g = &cli.global;
    if let Err(e) = std::fs::create_dir_all(&g.out_dir) {
        eprintln!("error: {}: {e}", g.out_dir.display());
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(g, a),
        Command::Convert(a) => commands::convert(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Macs(a) => commands::macs(g, a),
        Command::Params(a) => commands::params(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
