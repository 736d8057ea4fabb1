//! `flowiid` command-line interface.
//!
//! Settings resolve in this order, later winning: built-in defaults, the
//! `--config` file (with its includes), `--set key=value` overrides, then the
//! dedicated flags of each subcommand (`--seed`, `--data`, `--out`, ...).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "flowiid", version, about = "Single-step flow-matching intrinsic image decomposition")]
pub struct Cli {
    /// Configuration file (`key = value` lines, `include <path>` supported).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        /// Number of scenes in the held-out split.
        #[arg(long)]
        test_count: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the shading VAE (stage one).
    TrainVae {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the flow-matching model (stage two).
    TrainFm {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained VAE checkpoint.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Decompose an image, a directory of PNGs or a dataset directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resize and centre-crop inputs to the model resolution.
        #[arg(long)]
        resize: bool,
        /// Skip the raw float dumps.
        #[arg(long)]
        no_dump: bool,
        /// Only the given split when the input is a dataset directory.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score predictions against a dataset's ground truth.
    Eval {
        /// Directory with `<stem>_albedo` and `<stem>_shading` outputs.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// CSV report path; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and compare architecture variants.
    Ablate {
        /// full, no_concat, five_blocks or all.
        #[arg(long, default_value = "all")]
        preset: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print parameter counts per network and ablation.
    CountParams {
        /// Model preset; defaults to the configured model.
        #[arg(long)]
        preset: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
