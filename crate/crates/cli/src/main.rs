//! `vvb`: generate vector-vortex-beam datasets, train and evaluate
//! classifiers, reconstruct states and render images.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vvb_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use vvb_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Domain(_)) => 2,
            CliError::Io { .. } | CliError::Core(E::Io { .. }) => 3,
            CliError::Core(
                E::Shape { .. } | E::Magic { .. } | E::Version { .. } | E::Truncated(_) | E::Format(_),
            ) => 4,
            CliError::Core(E::Numerical(_) | E::Rank(_)) => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vvb", version, about = "Vector vortex beam simulation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Fixed-order single-threaded execution
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GridArgs {
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Half width of the square window, in the same units as the waist
    #[arg(long)]
    pub half_extent: Option<f64>,
    #[arg(long)]
    pub waist: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct NoiseArgs {
    /// Noise preset: none | labproxy
    #[arg(long)]
    pub noise: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// class15 | sector26 | sphere
    #[arg(long)]
    pub task: Option<String>,
    /// Training images per class
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Validation images per class
    #[arg(long)]
    pub val_per_class: Option<usize>,
    /// Images for the sphere task
    #[arg(long)]
    pub count: Option<usize>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// svm | cnn
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation dataset; the SVM uses a seeded half split of --train without it
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Number of principal components for the SVM
    #[arg(long)]
    pub ncomp: Option<usize>,
    /// PCA features: stokes | stokes+intensity
    #[arg(long)]
    pub features: Option<String>,
    /// SVM regularization
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for confusion.txt and confusion.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// PCA model, optionally carrying a sphere alignment
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labelled images used to fit the alignment when the model has none
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub m1: Option<i32>,
    #[arg(long, allow_negative_numbers = true)]
    pub m2: Option<i32>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Output PPM file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PcaReportArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ncomp: Option<usize>,
    #[arg(long)]
    pub features: Option<String>,
    /// Histogram bins for the radii
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a labelled dataset to VVBD files
    Generate {
        #[command(flatten)]
        args: GenerateArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train an SVM on PCA features or a CNN
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Confusion matrix of a model on a dataset
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate (θ, φ) from images and score the fidelity
    Reconstruct {
        #[command(flatten)]
        args: ReconstructArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Write one beam as a PPM image
    Render {
        #[command(flatten)]
        args: RenderArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Explained variance and radii statistics of a dataset
    PcaReport {
        #[command(flatten)]
        args: PcaReportArgs,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { args, common } => commands::generate(&args, &common),
        Command::Train { args, common } => commands::train(&args, &common),
        Command::Eval { args, common } => commands::eval(&args, &common),
        Command::Reconstruct { args, common } => commands::reconstruct(&args, &common),
        Command::Render { args, common } => commands::render(&args, &common),
        Command::PcaReport { args, common } => commands::pca_report(&args, &common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vvb: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
