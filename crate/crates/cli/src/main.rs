//! `cores` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage or configuration,
//! 3 dataset missing, 4 checkpoint missing or incompatible.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cores::graph::Mode;

#[derive(Debug, Parser)]
#[command(name = "cores", version, about = "Conformal-reward graph sparsification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on every requested fold and write one run directory per fold.
    Train(TrainArgs),
    /// Evaluate saved checkpoints on the test split of one fold.
    Eval(EvalArgs),
    /// Train over a grid of desired ratios and lambdas.
    Sweep(SweepArgs),
    /// Print dataset statistics as JSON.
    DatasetInfo(DataArgs),
    /// Write a synthetic BA-Shapes dataset in TU format.
    GenerateSynthetic(SyntheticArgs),
}

/// Where the data comes from; overrides the `[data]` section.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// TU dataset name, or `ba_shapes`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding TU dataset folders; falls back to CORES_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of folds to run; defaults to `data.folds`.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Report the last epoch's models instead of the best by validation.
    #[arg(long)]
    pub report_last_epoch: bool,
    /// Train the classifier alone on full graphs.
    #[arg(long)]
    pub vanilla: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub classifier: PathBuf,
    /// Without a policy checkpoint the classifier sees full graphs.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Fold whose test split is evaluated.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Where to write the metrics JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write kept-node and kept-edge masks as JSON lines to this file.
    #[arg(long)]
    pub dump_subgraphs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated desired ratios.
    #[arg(long = "d", value_delimiter = ',', num_args = 0..)]
    pub d_grid: Vec<f64>,
    /// Comma-separated lambdas.
    #[arg(long = "lambda", value_delimiter = ',', num_args = 0..)]
    pub lambda_grid: Vec<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 200)]
    pub graphs: usize,
    #[arg(long, default_value_t = 10)]
    pub base_nodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "BA_SHAPES")]
    pub name: String,
    /// Parent directory; files go to `<out>/<name>/`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::DatasetInfo(a) => commands::dataset_info(&a),
        Command::GenerateSynthetic(a) => commands::generate_synthetic(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
