use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;

pub use error::CliError;

/// Temporal-aligned transformer: synthetic data, training, evaluation, ablation.
#[derive(Debug, Parser)]
#[command(name = "tat", version)]
struct Cli {
    /// Progress and diagnostics on stderr; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the peaked synthetic dataset and split it at the test origin.
    Generate(GenerateArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, overall and on event weeks.
    Evaluate(EvaluateArgs),
    /// Train and score the full model and its ablated variants over several seeds.
    Ablate(AblateArgs),
    /// Compare reverse-mode gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config (JSON); defaults to the desk preset for the dataset schema.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training config (JSON); defaults to the desk preset.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Dataset file (.jsonl or .csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Schema file; defaults to `schema.json` next to the dataset.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (.jsonl or .csv) in demand units, with targets.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Event week as `NAME=WEEK` or `WEEK`; repeatable. Without any, the test
    /// events listed in `manifest.json` next to the dataset are used.
    #[arg(long = "event")]
    pub events: Vec<String>,
    /// Denominator of event metrics: `selected` or `full_horizon`.
    #[arg(long, default_value = "selected")]
    pub denominator: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Model config (JSON); defaults to the desk preset for the dataset schema.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Base seed; run `k` uses `seed + k`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel training runs. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Comma-separated subset of full, no_taa, no_self_attention, no_calibration.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, default_value = "selected")]
    pub denominator: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config (JSON); defaults to the micro preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Check with dropout active. Always refused: the objective would be random.
    #[arg(long)]
    pub training: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a, verbose),
        Command::Train(a) => commands::train(&a, verbose),
        Command::Evaluate(a) => commands::evaluate(&a, verbose),
        Command::Ablate(a) => commands::ablate(&a, verbose),
        Command::Gradcheck(a) => commands::gradcheck(&a, verbose),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
