//! `vitlab`: one binary, one subcommand per experiment recipe.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 I/O error.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vitlab", version, about = "Register-token and artifact experiments on a micro vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// `path,label` manifest of PPM images; synthetic data otherwise.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the micro-ViT classifier on the training split.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Validation manifest when training from files.
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Number of register tokens (overrides the config).
        #[arg(long)]
        registers: Option<usize>,
        /// Drop [CLS] and classify from the patch mean.
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output model archive.
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature, attention and per-block maps for one image.
    AnalyzeMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Norm statistics from `norms`; the image's own percentile otherwise.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Process the image at this side length instead of the model's.
        #[arg(long)]
        resolution: Option<usize>,
        /// Side of the rendered PGM maps.
        #[arg(long, default_value_t = 224)]
        px: usize,
        /// Also write Q/K/V/output maps for every block.
        #[arg(long)]
        blocks: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled token-norm statistics and the outlier threshold.
    Norms {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sample_n: Option<usize>,
        #[arg(long)]
        percentile: Option<f64>,
        /// Threshold each image separately.
        #[arg(long)]
        per_image: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Neighbour cosine similarity of patch embeddings, split by outlier mask.
    Cosine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        exclude_edges: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a probe dataset from frozen tokens.
    ProbeExtract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// position, reconstruction or classification.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear probe on an extracted dataset.
    ProbeTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Output head archive; metrics go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained probe, per token category.
    ProbeEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        head: PathBuf,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe accuracy on outlier rows at several percentile thresholds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Comma-separated percentiles.
        #[arg(long, value_delimiter = ',', default_value = "98,95,90")]
        percentiles: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear classifier on [CLS] / patch-mean / register representations.
    ReprTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// cls+pm, cls+pm+reg or pm+reg.
        #[arg(long, default_value = "cls+pm")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a CSV grid as a PGM image.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 224)]
        px: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emissions estimate CO₂ = CI · PUE · P · t, in kg.
    Carbon {
        #[command(flatten)]
        common: Common,
        /// Carbon intensity, kg CO₂ per kWh.
        #[arg(long)]
        ci: f64,
        /// Power usage effectiveness.
        #[arg(long)]
        pue: f64,
        /// Average power draw, kW.
        #[arg(long)]
        power: f64,
        #[arg(long)]
        hours: f64,
        /// Also write the result and a run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
