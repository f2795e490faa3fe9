//! `dca`: synthetic data, incremental training, evaluation and analysis.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dca_core::DcaError;

#[derive(Debug, Parser)]
#[command(name = "dca", version, about = "Exemplar-free incremental object detection toolkit")]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, env = "DCA_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a training corpus, a held-out corpus and a phase protocol.
    GenData(GenDataArgs),
    /// Build a synthetic semantic table or validate a provided one.
    EmbedClasses(EmbedArgs),
    /// Train every phase of a protocol.
    Train(TrainArgs),
    /// Evaluate a trained phase on the held-out corpus.
    Eval(EvalArgs),
    /// Per-phase recall and recognition accuracy of the base classes.
    AnalyzeForgetting(AnalyzeArgs),
    /// Re-score a trained model across fusion weights.
    SweepBeta(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Class grid as SHAPESxCOLORS.
    #[arg(long, default_value = "4x5")]
    pub classes: String,
    /// Phase sizes, comma separated, in taxonomy order.
    #[arg(long, value_delimiter = ',', default_value = "10,10")]
    pub split: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub images: usize,
    #[arg(long, default_value_t = 300)]
    pub held_out: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    #[arg(long)]
    pub min_object_px: Option<usize>,
    #[arg(long)]
    pub max_object_px: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// A `gen-data` run directory supplying the taxonomy.
    #[arg(long)]
    pub data: PathBuf,
    /// `synthetic` or `file:<path>`.
    #[arg(long, default_value = "synthetic")]
    pub source: String,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A `gen-data` run directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Semantic table file; a synthetic table of the model's width otherwise.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `data` (the generated protocol), `joint` (all classes at once) or a
    /// protocol file.
    #[arg(long, default_value = "data")]
    pub protocol: String,
    /// Component switch `NAME=on|off` with NAME one of DLR, SRD, DCF, HKD.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    /// Distillation term switch `TERM=on|off` with TERM one of out, vis, proj.
    #[arg(long = "kd")]
    pub kd: Vec<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable old-model pseudo labels.
    #[arg(long)]
    pub no_pseudo_labels: bool,
    /// Also train a joint model on all classes for the gap metrics.
    #[arg(long)]
    pub with_upper_bound: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A `train` run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Phase to evaluate; the last one by default.
    #[arg(long)]
    pub phase: Option<usize>,
    /// A joint `train` run supplying the upper bound for the gap metrics.
    #[arg(long)]
    pub upper_bound: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub recall_iou: f64,
    /// Also export per-object features of the last phase.
    #[arg(long)]
    pub features: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub phase: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub betas: Vec<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(DcaError),
}

impl From<DcaError> for CliError {
    fn from(e: DcaError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(&cli.run_root, a),
        Command::EmbedClasses(a) => commands::embed_classes(&cli.run_root, a),
        Command::Train(a) => commands::train(&cli.run_root, a),
        Command::Eval(a) => commands::eval(&cli.run_root, a),
        Command::AnalyzeForgetting(a) => commands::analyze_forgetting(&cli.run_root, a),
        Command::SweepBeta(a) => commands::sweep_beta(&cli.run_root, a),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
