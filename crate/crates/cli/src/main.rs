//! `cooptraj` — generate, correct, train, predict and evaluate cooperative
//! trajectory scenes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 1 anything else.

mod commands;
mod plot;
mod support;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cooptraj", version, about = "Multi-view cooperative trajectory prediction pipeline")]
pub struct Cli {
    /// Worker threads for scenario-level work. Output order never depends on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Cross,
    Tee,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BucketsArg {
    /// Agent-count buckets 0-190, 190-290, ..., 590+.
    Table5,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MissRateArg {
    /// Fraction of cases whose best final error exceeds 2 m.
    BestOfK,
    /// Exceeding modes divided by K, averaged over cases.
    PerModeOverK,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scenario files.
    Gen {
        #[arg(long, default_value_t = 20)]
        agents: usize,
        #[arg(long, value_enum, default_value_t = LayoutArg::Cross)]
        layout: LayoutArg,
        /// Perturbation spec (JSON) applied after generation.
        #[arg(long)]
        perturb: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes; with more than one, `--out` is a directory.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Prediction targets per scene.
        #[arg(long, default_value_t = 4)]
        targets: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a scenario file and check every scene invariant.
    Validate { file: PathBuf },
    /// Repair identity switches and write the corrected scene.
    Correct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Edit report, one JSON edit per line.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train on scenario files; writes checkpoint, loss curve and manifest.
    Train {
        /// Scenario files or directories of `.jsonl` files.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of scenes held out for validation.
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict K global-frame trajectories per target.
    Predict {
        #[arg(long, required = true, num_args = 1..)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the scenes' ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = BucketsArg::Table5)]
        buckets: BucketsArg,
        #[arg(long, value_enum, default_value_t = MissRateArg::BestOfK)]
        miss_rate: MissRateArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare map-feature recomputation with and without the cache.
    BenchCache {
        #[arg(long, required = true, num_args = 1..)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the encoder and dump cache and graph statistics.
    Encode {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dump_cache_stats: Option<PathBuf>,
        /// Per-agent signal trend table.
        #[arg(long)]
        dump_signals: Option<PathBuf>,
    },
    /// Report per-scenario fusion presence and fill-in statistics.
    Fuse {
        #[arg(long, required = true, num_args = 1..)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Draw a scene and its predictions as SVG.
    Plot {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(support::exit_code(&e))
        }
    }
}
