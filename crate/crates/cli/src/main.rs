//! `unified-reasoner`: one binary wiring dataset generation, training,
//! evaluation, probing, and visualization into reproducible runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "unified-reasoner", version, about = "Visual recognition and reasoning as prompt-conditioned sequence prediction")]
struct Cli {
    /// TOML config file; unset sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    /// Root seed for the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; a resolved-config snapshot is always written here.
    #[arg(long, global = true, default_value = "runs/out")]
    out: std::path::PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Dotted config overrides, e.g. --set model.dim=64 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate dataset splits (frames, tracking videos, blicket panels).
    GenData {
        /// records: binary record files; png-dump: one PNG per frame.
        #[arg(long, default_value = "records")]
        format: String,
    },
    /// Train a model under a task schedule.
    Train {
        /// Directory holding generated datasets.
        #[arg(long)]
        data: std::path::PathBuf,
        /// joint | alternating | single-switch | none (main task only).
        #[arg(long, default_value = "single-switch")]
        schedule: String,
        /// Recognition task for pretraining phases.
        #[arg(long, default_value = "detect_all")]
        pretrain_task: String,
        /// Reasoning (or final) task.
        #[arg(long, default_value = "cater")]
        main_task: String,
        /// Steps before the switch (single-switch only); default half of total.
        #[arg(long)]
        pretrain_steps: Option<u64>,
        /// Alternating interval in steps.
        #[arg(long, default_value_t = 100)]
        interval: u64,
        /// conv-stem | linear-patch.
        #[arg(long)]
        backbone: Option<String>,
        /// Slot tokens per frame.
        #[arg(long)]
        slots: Option<usize>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<std::path::PathBuf>,
    },
    /// Evaluate a checkpoint on test splits.
    Eval {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long)]
        data: std::path::PathBuf,
        /// Comma-separated tasks (default: cater,acre,detect_all).
        #[arg(long, default_value = "cater,acre,detect_all")]
        tasks: String,
    },
    /// Freeze a checkpoint's encoder and train a single-slot probe decoder.
    Probe {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long)]
        data: std::path::PathBuf,
        /// Probing objective: detect_all | detect_visible | snitch.
        #[arg(long)]
        task: Option<String>,
        /// Confidence threshold for reported detections.
        #[arg(long)]
        threshold: Option<f64>,
        /// Probe training steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Render per-slot overlay images from a trained probe.
    Viz {
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long)]
        probe_checkpoint: std::path::PathBuf,
        #[arg(long)]
        data: std::path::PathBuf,
        /// Frame indices into the test split, comma separated.
        #[arg(long, default_value = "0")]
        frames: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// Upscaling factor for overlays.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Finite-difference gradient checks over every tape op.
    GradCheck {
        /// Random cases per op.
        #[arg(long, default_value_t = 10)]
        cases: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes, everything else is a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Ok(threads) = std::env::var("UNIFIED_REASONER_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => reasoner_core::par::init_threads(n),
            _ => {
                eprintln!("UNIFIED_REASONER_THREADS must be a positive integer");
                std::process::exit(1);
            }
        }
    }
    match commands::run(cli) {
        Ok(()) => {}
        Err(e) => {
            // Config/usage mistakes exit 1, everything else 2.
            if e.downcast_ref::<commands::UsageError>().is_some() {
                eprintln!("error: {e}");
                std::process::exit(1);
            }
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
