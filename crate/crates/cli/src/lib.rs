//! Command implementations of the `asap3d` tool.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::run;
pub use config::{apply_json, WeightsConfig};
pub use manifest::RunManifest;

use asap3d::metrics::DEFAULT_MATCH_RADIUS_FRAC;
use asap3d::optimizer::{LossSettings, OptimizerConfig};

/// Exit code for invalid inputs, configurations and failed checks.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for filesystem failures.
pub const EXIT_IO: i32 = 2;

/// Help epilogue listing the defaults.
pub fn defaults_help() -> String {
    let s = LossSettings::default();
    let w = s.weights;
    let o = OptimizerConfig::default();
    format!(
        "Defaults:\n  loss weights: lambda_vs={} lambda_d={} lambda_n={} lambda_e={}\n  \
         depth-normal consistency: {}, double-edge clipping: {}, pyramid levels: {}\n  \
         optimizer: depth step {}, edge step {}, pose step {}, beta1 {}, beta2 {}, {} iterations, tolerance {}\n  \
         edge matching radius: {} of the image diagonal\n  seed: 0\n\
         Exit codes: 0 success, 1 validation error or failed check, 2 I/O error.",
        w.lambda_vs,
        w.lambda_d,
        w.lambda_n,
        w.lambda_e,
        if w.consistency { "on" } else { "off" },
        if s.clip { "on" } else { "off" },
        s.levels,
        o.step,
        o.edge_step,
        o.pose_step,
        o.beta1,
        o.beta2,
        o.iterations,
        o.tolerance,
        DEFAULT_MATCH_RADIUS_FRAC,
    )
}

#[derive(Debug, Parser)]
#[command(name = "asap3d", version, about = "Depth, normal and edge recovery with as-smooth-as-possible 3D regularization", after_help = defaults_help())]
pub struct Cli {
    /// Seed of every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a catalog scene or a scene JSON file to an image/ground-truth bundle.
    Scene(SceneArgs),
    /// Optimize depth, edges and poses of a bundle's target view.
    #[command(after_help = defaults_help())]
    Optimize(OptimizeArgs),
    /// Depth metrics of predicted against ground-truth depth PFMs.
    EvalDepth(EvalDepthArgs),
    /// Angular metrics of predicted against ground-truth normal PFMs.
    EvalNormal(EvalNormalArgs),
    /// ODS/OIS/AP of soft edge maps against binary edge ground truth.
    EvalEdge(EvalEdgeArgs),
    /// Geometric edge ground truth from a semantic label map.
    EdgeGt(EdgeGtArgs),
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Catalog name (plane, corridor, box-street) or path to a scene JSON file.
    pub scene: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Loss settings shared by `optimize` and `gradcheck`.
#[derive(Debug, Args)]
pub struct LossArgs {
    /// Loss-weight JSON (keys of the weights config); overrides flags.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Number of pyramid levels.
    #[arg(long)]
    pub scale_levels: Option<usize>,
    /// Disable double-edge clipping of depth-triplet responses.
    #[arg(long)]
    pub no_clip: bool,
    /// Initial depth PFM instead of the median-plus-noise initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Bundle directory written by `scene`.
    pub bundle: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Optimizer JSON (keys of the optimizer config); overrides flags.
    #[arg(long)]
    pub optimizer: Option<PathBuf>,
    /// Iteration budget.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalDepthArgs {
    /// Predicted depth PFM, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth depth PFM, or a directory; files named `depth*.pfm` are used.
    #[arg(long)]
    pub gt: PathBuf,
    /// Clamp prediction and ground truth to this depth.
    #[arg(long)]
    pub cap: Option<f64>,
    /// Scale each prediction by median(gt)/median(pred) first.
    #[arg(long)]
    pub median_align: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalNormalArgs {
    /// Predicted normal PFM, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth normal PFM, or a directory; files named `normal*.pfm` are used.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalEdgeArgs {
    /// Predicted edge map (PFM in [0, 1] or PGM), or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth edge PGM, or a directory; files named `edge*.pgm` are used.
    #[arg(long)]
    pub gt: PathBuf,
    /// Matching radius as a fraction of the image diagonal.
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS_FRAC)]
    pub match_radius: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EdgeGtArgs {
    /// 16-bit label PGM.
    #[arg(long)]
    pub labels: PathBuf,
    /// 16-bit instance-id PGM.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Merge table CSV (raw_id,raw_name,merged_name); defaults to the shipped Cityscapes table.
    #[arg(long)]
    pub merge: Option<PathBuf>,
    /// Output edge PGM.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Bundle directory written by `scene`.
    pub bundle: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Coordinates checked per parameter block.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}
