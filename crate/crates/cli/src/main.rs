use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "biasprobe", version, about = "Measure which image cues a classifier relies on by ablating them")]
struct Cli {
    /// Worker threads; BIASPROBE_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset whose discriminative cue is known.
    Generate(GenerateArgs),
    /// Write an ablated mirror of a dataset directory.
    Ablate(AblateArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Run an ablation sweep and write FCR reports and plot data.
    Sweep(SweepArgs),
    /// Compare two sweep reports.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// texture or shape
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 300)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub val_per_class: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// color, texture, shape or topology
    #[arg(long)]
    pub kind: String,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Filter window for texture and shape.
    #[arg(long)]
    pub window: Option<usize>,
    /// Grid side for topology.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Tile permutation seed for topology.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = biasprobe::ablation::DEFAULT_RANGE_RADIUS)]
    pub range_radius: f32,
    #[arg(long, default_value_t = biasprobe::ablation::DEFAULT_EDGE_THRESHOLD)]
    pub edge_threshold: f32,
    /// Only ablate images of this category; others are copied unchanged.
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// resnet or densenet
    #[arg(long, default_value = "resnet")]
    pub model: String,
    /// desk (64 px) or paper (224 px)
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// adam or sgd; defaults to adam for resnet and sgd with momentum for densenet.
    #[arg(long)]
    pub opt: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub wd: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable flip and shift augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated category names; defaults to every directory under train/, sorted.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// Training images per category; defaults to the smallest class size.
    #[arg(long)]
    pub train_n: Option<usize>,
    /// Validation images per category; defaults to the smallest class size.
    #[arg(long)]
    pub val_n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Target category name.
    #[arg(long)]
    pub target: String,
    /// texture, shape, topology or color
    #[arg(long)]
    pub ablation: String,
    /// Comma-separated windows (grid sides for topology), strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub windows: Vec<usize>,
    /// Evaluate this checkpoint instead of training.
    #[arg(long, conflicts_with = "train_inline")]
    pub checkpoint: Option<PathBuf>,
    /// Train one model per repeat seed before sweeping.
    #[arg(long)]
    pub train_inline: bool,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = biasprobe::ablation::DEFAULT_RANGE_RADIUS)]
    pub range_radius: f32,
    #[arg(long, default_value_t = biasprobe::ablation::DEFAULT_EDGE_THRESHOLD)]
    pub edge_threshold: f32,
    /// Tile permutation seed for topology sweeps.
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn configure_threads(flag: Option<usize>) -> Result<(), commands::CliError> {
    let from_env = match std::env::var("BIASPROBE_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
            commands::CliError::Usage(format!("BIASPROBE_THREADS must be a positive integer, got '{v}'"))
        })?),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(flag) {
        if n == 0 {
            return Err(commands::CliError::Usage("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| commands::CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads(cli.threads).and_then(|_| match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Compare(a) => commands::compare(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
