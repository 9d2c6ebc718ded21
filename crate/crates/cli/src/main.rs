use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "protoexplain", version, about = "Prototype explanations for frozen CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit KMEx and composite prototype banks on the train split.
    Fit(FitArgs),
    /// Predict with the CNN, KMEx and composite models.
    Predict(RunArgs),
    /// Write explanation maps.
    Explain(RunArgs),
    /// Write attribution maps from the encoder output down to --depth-from.
    Attribute(RunArgs),
    /// Accuracy and alignment reports plus a projection CSV.
    Eval(RunArgs),
    /// Explanation, attribution and gallery PNGs.
    Render(RenderArgs),
    /// Generate a synthetic Gaussian-blob dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Shallowest block of the composite family; defaults to the shallowest block.
    #[arg(long)]
    pub depth_from: Option<u32>,
    #[arg(long, default_value_t = 5)]
    pub k_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// k-means restarts per class.
    #[arg(long)]
    pub n_init: Option<usize>,
    /// Per-class cap on composite rows handed to k-means.
    #[arg(long)]
    pub row_cap: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Composite depth to use; defaults to the shallowest fitted bank.
    #[arg(long)]
    pub depth_from: Option<u32>,
    /// Restrict to one split; all samples otherwise.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Explicit sample ids (repeatable); overrides --split.
    #[arg(long = "sample")]
    pub samples: Vec<usize>,
    /// Attribution class; defaults to the CNN's predicted class.
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overlay opacity in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub test_per_class: usize,
    /// Side of the per-sample PNG; 0 skips images.
    #[arg(long, default_value_t = 224)]
    pub image_size: u32,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("PROTOEXPLAIN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PROTOEXPLAIN_THREADS={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Fit(args) => commands::fit(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Explain(args) => commands::explain(&args),
        Command::Attribute(args) => commands::attribute(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Render(args) => commands::render(&args),
        Command::Synth(args) => commands::synth(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
