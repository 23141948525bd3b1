use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Train, evaluate and sweep early-exit transmission policies for split
/// inference over an AWGN channel.
#[derive(Parser)]
#[command(name = "edgexit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (JSON); built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `train.beta=0.1` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overrides train.seed and eval.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides paths.out_dir
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run training stages and write stage{N}.ckpt plus train_log.jsonl
    Train(TrainArgs),
    /// Evaluate one policy over an SNR grid
    Eval(EvalArgs),
    /// Evaluate several policies over an SNR grid, optionally at matched savings
    Sweep(SweepArgs),
    /// Calibrate per-class confidence thresholds
    Calibrate(CalibrateArgs),
    /// Per-class early-exit confidence statistics
    Stats(StatsArgs),
    /// Per-part FLOPs table
    Flops(FlopsArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stage to run: 1, 2, 3 or all
    #[arg(long, default_value = "all", value_parser = ["1", "2", "3", "all"])]
    pub stage: String,
    /// Decision-network criterion: joint_ce, bce_gt or mixed (overrides train.criterion)
    #[arg(long)]
    pub criterion: Option<String>,
    /// Checkpoint to continue from; defaults to the previous stage's file in out_dir
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct PolicyArgs {
    /// Per-class threshold table written by `calibrate`; calibrated on the
    /// training split when omitted
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Decision networks for savings matching as BETA=CHECKPOINT pairs,
    /// comma separated
    #[arg(long, value_name = "LIST")]
    pub neural_set: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// always_early, always_final, gt_oracle, confidence, entropy, random,
    /// per_class, per_class_gt or neural
    #[arg(long)]
    pub policy: String,
    /// Single SNR in dB
    #[arg(long, conflicts_with = "snr_grid", allow_negative_numbers = true)]
    pub snr_db: Option<f64>,
    /// Comma-separated SNRs in dB (defaults to eval.snr_grid)
    #[arg(long, allow_hyphen_values = true)]
    pub snr_grid: Option<String>,
    /// JSONL results file, relative to out_dir; a .csv twin is written next to it
    #[arg(long, default_value = "results.jsonl")]
    pub out: PathBuf,
    #[command(flatten)]
    pub policy_args: PolicyArgs,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated policy names (defaults to eval.policies)
    #[arg(long)]
    pub policies: Option<String>,
    /// Comma-separated SNRs in dB (defaults to eval.snr_grid)
    #[arg(long, allow_hyphen_values = true)]
    pub snr_grid: Option<String>,
    /// Tune each tunable policy to this savings level per SNR
    #[arg(long)]
    pub match_savings: Option<f64>,
    /// JSONL results file, relative to out_dir
    #[arg(long, default_value = "sweep.jsonl")]
    pub out: PathBuf,
    /// Worker threads for SNR cells
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub policy_args: PolicyArgs,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Weight of accuracy against savings (defaults to eval.accuracy_weight)
    #[arg(long)]
    pub accuracy_weight: Option<f64>,
    /// Dataset split to calibrate on
    #[arg(long, default_value = "train", value_parser = ["train", "test"])]
    pub split: String,
    /// Group samples by ground-truth label instead of predicted class
    #[arg(long)]
    pub use_gt_label: bool,
    /// Output table, relative to out_dir
    #[arg(long, default_value = "tau_table.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV, relative to out_dir
    #[arg(long, default_value = "confidence_stats.csv")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Stats(a) => commands::stats(a),
        Command::Flops(a) => commands::flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
