//! Command-line driver: synthetic data generation, head training, tile
//! elimination, calibration, evaluation and OOD simulation.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

pub use config::{EatConfig, EatMode, OodConfig, RunConfig, SplitConfig};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "TRUSTKIT_THREADS";

/// Version tag written into every JSON output.
pub const SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "trustkit",
    version,
    about = "Uncertainty, conformal sets and OOD gating over tile embeddings"
)]
#[command(after_help = "Set TRUSTKIT_THREADS to bound the worker pool.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration with optional [scenario], [model], [split],
    /// [eat] and [ood] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioKind {
    Ind,
    Ood,
    Eat,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Cohort {
    /// Test patients of the chosen resplit plus every unlabelled patient.
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    ///
    /// Writes embeddings.emb, manifest.csv, split.json and config.json into
    /// --out; eat cohorts add blobs.csv (tile_id,blob) and external cohorts
    /// add shifted.csv (patient_id).
    Gen {
        #[arg(value_enum)]
        kind: ScenarioKind,
        #[command(flatten)]
        common: Common,
        /// OOD-to-in-domain patient ratio for `ood`.
        #[arg(long, default_value_t = 1.0)]
        ood_ratio: f64,
        /// Shifted share of the `external` cohort.
        #[arg(long, default_value_t = 0.5)]
        shifted_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a head on the training patients of a generated cohort.
    ///
    /// Writes the checkpoint to --out and <out>.report.json next to it.
    Train {
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a tile-elimination filter on the training patients.
    ///
    /// Writes filter.json and retention.csv
    /// (slide_id,patient_id,n_tiles,n_retained) into --out.
    Eat {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<EatMode>,
        /// Target elimination rate in threshold mode.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate conformal thresholds at each --alpha.
    ///
    /// Reads either calibration records (--records, CSV
    /// item_id,prob_0..prob_{K-1},label with -1 for OOD) or the calibration
    /// patients of a resplit scored by --checkpoint.
    Calibrate {
        data: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["data", "checkpoint"])]
        records: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        resplit: usize,
        /// Miscoverage level; repeat for several. Defaults to 0.1, 0.05, 0.01.
        #[arg(long)]
        alpha: Vec<f64>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score patients and report sets, breakdowns and subgroup gaps.
    ///
    /// Writes report.json and, per level, patients-alpha-<a>.csv with
    /// columns patient_id,set,score_ood,breakdown,group_sex,group_race.
    Evaluate {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        calibrator: PathBuf,
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        resplit: usize,
        #[arg(long, value_enum, default_value = "test")]
        cohort: Cohort,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coverage of plain, gated and risk-controlled sets as OOD patients
    /// are mixed into the calibration and test pools.
    ///
    /// Writes coverage.csv (ratio,ungated_coverage,gated_coverage,
    /// gated_crc_coverage,rho_hat,ungated_set_size,gated_crc_set_size,
    /// gate_tpr,gate_fpr) and summary.json into --out.
    SimulateOod {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Comma-separated OOD ratios; overrides [ood] ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    init_threads();
    commands::dispatch(cli.command)
}

fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
