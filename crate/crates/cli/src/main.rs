mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attd_core::Error;

/// Reasoning-supervised attention distillation on the GridVQA benchmark.
#[derive(Parser, Debug)]
#[command(name = "attd", version)]
struct Cli {
    /// Write the run manifest here instead of the command's default location.
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a GridVQA dataset directory.
    GenData(GenDataArgs),
    /// Run stage 1, stage 2 or both.
    Train(TrainArgs),
    /// Question-branch accuracy and attention metrics of a checkpoint.
    Eval(EvalArgs),
    /// Accuracy with the referenced objects masked out.
    Ablate(EvalArgs),
    /// Compare a baseline and a distilled checkpoint and write heatmaps.
    Viz(VizArgs),
    /// Run the fast invariant suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    /// Grid size as HxW, e.g. 8x8.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    d_visual: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// JSON file with any of: seed, train, val, config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the metrics log.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Checkpoint to resume or to start stage 2 from.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Epochs for every stage being run.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Also update the language stream in stage 2.
    #[arg(long)]
    train_language: bool,
    /// JSON file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    distilled: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Samples to draw heatmaps for.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value = "viz")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Test fixture: flips the sign of the KL divergence under test.
    #[arg(long, hide = true)]
    corrupt_kl_sign: bool,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid size {v:?}: {e}"));
    Ok((dim(h)?, dim(w)?))
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn property(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Input(_) | Error::Contract(_) | Error::Dimension(_) => 2,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::MissingComponent { .. } => 3,
            Error::Mismatch(_) | Error::Version { .. } => 4,
            Error::Numeric(_) | Error::State(_) => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn init_threads() -> Result<(), Failure> {
    let n = match std::env::var("ATTD_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("ATTD_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("attd: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_grid;

    #[test]
    fn grid_sizes_parse_either_case() {
        assert_eq!(parse_grid("8x8"), Ok((8, 8)));
        assert_eq!(parse_grid("3X5"), Ok((3, 5)));
        assert!(parse_grid("8").is_err());
        assert!(parse_grid("8x").is_err());
        assert!(parse_grid("-1x4").is_err());
    }
}
