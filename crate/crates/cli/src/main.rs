//! `duett`: data generation, preprocessing, pre-training, fine-tuning,
//! probing, evaluation, reconstruction, label sweeps and ablations.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid configuration, 4 data or
//! checkpoint error, 5 numeric divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duett_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "duett", version, about = "Dual event/time Transformer for sparse event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate(GenerateArgs),
    /// Split a dataset and fit normalization on the training part.
    Preprocess(PreprocessArgs),
    /// Self-supervised pre-training.
    Pretrain(TrainArgs),
    /// Supervised fine-tuning of a pre-trained checkpoint.
    Finetune(TuneArgs),
    /// Linear probe on a frozen pre-trained encoder.
    Probe(TuneArgs),
    /// Score a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Mask one event type and reconstruct it.
    Reconstruct(ReconstructArgs),
    /// Fine-tune on nested fractions of the labelled stays.
    SweepLabels(SweepArgs),
    /// Pre-train, fine-tune and evaluate one ablation variant.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// basic, reconstruction or classification
    #[arg(long, default_value = "classification")]
    preset: String,
    #[arg(long)]
    n_stays: Option<usize>,
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training stays.
    #[arg(long)]
    data: PathBuf,
    /// Validation stays.
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint path; logs and the resolved config go beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Split to report on; defaults to the validation stays.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also report masked reconstruction MSE of this event type.
    #[arg(long)]
    event: Option<String>,
    /// Report CSV; the summary and curves go beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    event: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 1.0])]
    fractions: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// full, or one of the ablation flag names
    #[arg(long)]
    variant: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::InvalidArgument(_) => 2,
        Error::Divergence(_) | Error::Tensor(_) => 5,
        Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 4,
    }
}

/// `path` with `suffix` appended to its file name.
pub(crate) fn beside(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DUETT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DUETT_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a.preset, a.n_stays, a.seed, &a.out),
        Command::Preprocess(a) => commands::preprocess(&a.config, &a.data, &a.out_dir),
        Command::Pretrain(a) => commands::pretrain(&a.config, &a.data, &a.val, &a.out),
        Command::Finetune(a) => commands::tune(&a.config, &a.checkpoint, &a.data, &a.val, a.test.as_deref(), &a.out, false),
        Command::Probe(a) => commands::tune(&a.config, &a.checkpoint, &a.data, &a.val, a.test.as_deref(), &a.out, true),
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.data, a.event.as_deref(), &a.out),
        Command::Reconstruct(a) => commands::reconstruct(&a.checkpoint, &a.data, &a.event, &a.out),
        Command::SweepLabels(a) => {
            commands::sweep(&a.config, &a.checkpoint, &a.data, &a.val, a.test.as_deref(), &a.fractions, &a.out)
        }
        Command::Ablate(a) => commands::ablate(&a.config, &a.variant, &a.data, &a.val, a.test.as_deref(), &a.out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
