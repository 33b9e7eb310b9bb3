//! `convbasis`: batch runners for basis-convolution experiments.
//!
//! Exit codes: 0 success, 1 `verify-cost` found mismatches, 2 config or
//! input error, 3 a training run diverged (partial logs are kept).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "convbasis", version, about = "Basis-convolution training, cost analysis and layer search")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replaces `train.seeds` with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for `profile`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostMode {
    All,
    Full,
    WeightCompose,
    OutputCompose,
    RestrictedCompose,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Closed-form operation counts per conv layer and mode.
    Cost {
        #[arg(long, value_enum, default_value_t = CostMode::All)]
        mode: CostMode,
        /// Basis count for the dense modes (default: basis.r_fraction of c_out).
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Single layer instead of the configured model: C_IN,C_OUT,K,H,W[,STRIDE[,PADDING]].
        #[arg(long)]
        spec: Option<String>,
    },
    /// Re-counts every row of a cost CSV with the counting oracles.
    VerifyCost {
        #[arg(long)]
        input: PathBuf,
    },
    /// Lists the conv layers of the configured model.
    Arch,
    /// Baseline training.
    Train,
    /// Training with basis layers for the first `basis.skip` epochs.
    SkipTrain {
        /// Integer epochs or a fraction below 1.
        #[arg(long)]
        skip: Option<String>,
        /// Comma-separated ordinals.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Extract, rebuild and resume at 70% of the schedule, with controls.
    Sanity {
        /// Trained full checkpoint to extract from instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One-layer-only sensitivity runs plus the baseline.
    Profile {
        /// Comma-separated ordinals (default: all).
        #[arg(long)]
        layers: Option<String>,
    },
    /// Combination estimates and bucketed selection.
    Search {
        /// Profiling CSV written by `profile`.
        #[arg(long, conflicts_with = "cloud")]
        profile: Option<PathBuf>,
        /// Ready-made estimate cloud (needs --baseline-time).
        #[arg(long, requires = "baseline_time")]
        cloud: Option<PathBuf>,
        #[arg(long)]
        baseline_time: Option<f64>,
        #[arg(long)]
        n_buckets: Option<usize>,
    },
    /// Skip training for each selected combination, against the baseline.
    RunSelected {
        /// Selection CSV written by `search` (default: search.combos).
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Skip training on the first five and on the last five conv layers.
    LightHeavy,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.global, &cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
