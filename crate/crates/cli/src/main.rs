//! Command-line front end. Subcommands wrap the library operations; exit
//! codes classify failures: 1 usage, 2 data/format, 3 numeric divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_steer::Error;

mod ops;

#[derive(Parser)]
#[command(name = "latent-steer", version, about = "Train and interrogate a latent-space steering controller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving dataset.
    GenData(GenDataArgs),
    /// Jointly train the perception and control networks.
    Train(TrainArgs),
    /// Cross-validate the training pipeline over contiguous folds.
    Crossval(CrossvalArgs),
    /// Teacher-forced offline evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Per-dimension latent perturbation maps for one frame.
    Alp(AlpArgs),
    /// Dataset-level perturbation sensitivity summary.
    Impact(ImpactArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Image geometry preset: paper (78x200) or desk (48x64).
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Dataset file to write; a `.repro.json` sidecar lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOpts {
    /// Model geometry preset: paper (78x200, M=32) or desk (48x64, M=16).
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Reconstruction loss weight.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// KL loss weight.
    #[arg(long, default_value_t = 0.001)]
    gamma: f64,
    /// Prediction loss weight.
    #[arg(long, default_value_t = 0.066)]
    alpha: f64,
    /// Label-magnitude weighting exponent inside the prediction loss.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Sequences per optimizer step.
    #[arg(long, default_value_t = 20)]
    batch: usize,
    /// Frames per training sequence.
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path to write; the parameter blob and a `.report.json`
    /// land next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct CrossvalArgs {
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON fold report to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON error report to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlpArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Frame index to analyze (0-based).
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Latent dimensions to report: `all` or a comma list of 1-based indices.
    #[arg(long, default_value = "all")]
    dims: String,
    /// Quantile of the normalized delta above which pixels count as changed.
    #[arg(long, default_value_t = 0.9)]
    threshold_quantile: f64,
    /// Output directory for the report and the PNG triplets.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImpactArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Number of frames to score (an evenly strided subset).
    #[arg(long, default_value_t = 100)]
    sample: usize,
    /// Fraction of frames in the best/worst error groups, in (0, 0.5].
    #[arg(long, default_value_t = 0.1)]
    decile: f64,
    /// Output directory for the report and summary figures.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Index(_) => 1,
        Error::Dim(_) | Error::Format { .. } | Error::Integrity(_) | Error::Json(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and succeed; everything
            // else is a usage error.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match ops::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
