mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

/// Multi-annotator bounding-box fusion pipeline: simulate noisy experts,
/// fuse their boxes, export per-box loss weights, evaluate, and render.
#[derive(Debug, Parser)]
#[command(name = "annofuse", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). Logs go to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Worker threads for per-image work (0 = one per core). Output does not
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate ground truth and noisy expert annotations.
    Simulate(SimulateArgs),
    /// Fuse a multi-annotator file into consensus boxes with confidences.
    Fuse(FuseArgs),
    /// Evaluate a prediction, fused or annotator file against ground truth.
    Eval(EvalArgs),
    /// Export per-box training weights from a fused file.
    LossWeights(LossWeightsArgs),
    /// Render one image's boxes as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory for ground_truth.json, multi_annotator.json,
    /// expert_<id>.json and transition_matrices.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 1000)]
    pub scenes: usize,
    /// Number of simulated experts R.
    #[arg(long, default_value_t = 3)]
    pub experts: usize,
    /// Shared expert proficiency p, in (0, 1).
    #[arg(long, default_value_t = 0.8)]
    pub proficiency: f64,
    /// Standard deviation of the transition-matrix diagonal draw.
    #[arg(long, default_value_t = 0.05)]
    pub diag_stddev: f64,
    /// Mean of the diagonal draw [default: proficiency].
    #[arg(long)]
    pub diag_mean: Option<f64>,
    /// IoU floor for jittered boxes; 1 disables jitter [default: proficiency].
    #[arg(long)]
    pub jitter_iou_floor: Option<f64>,
    /// Number of object categories C.
    #[arg(long, default_value_t = 10)]
    pub categories: usize,
    /// Canvas width in pixels.
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    /// Canvas height in pixels.
    #[arg(long, default_value_t = 256)]
    pub height: u32,
    /// Minimum objects per scene.
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    /// Maximum objects per scene.
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    /// Minimum object side in pixels.
    #[arg(long, default_value_t = 20)]
    pub min_size: u32,
    /// Maximum object side in pixels.
    #[arg(long, default_value_t = 64)]
    pub max_size: u32,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Multi-annotator input file.
    #[arg(long)]
    pub input: PathBuf,
    /// Fused output file.
    #[arg(long)]
    pub output: PathBuf,
    /// Boxes match when IoU is strictly greater than this.
    #[arg(long, default_value_t = 0.4)]
    pub iou_thresh: f64,
    /// normalized_agreement or raw_count.
    #[arg(long, default_value = "normalized_agreement")]
    pub confidence_mode: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// File to evaluate: predictions (score), fused (confidence as score),
    /// multi_annotator (one row per annotator, score 1) or ground_truth.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth file.
    #[arg(long)]
    pub truth: PathBuf,
    /// IoU thresholds: a value, a comma list, or start:end:step.
    #[arg(long, default_value = "0.4")]
    pub thresholds: String,
    /// JSON report output file.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossWeightsArgs {
    /// Fused input file.
    #[arg(long)]
    pub input: PathBuf,
    /// Weight export output file.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Any dataset file.
    #[arg(long)]
    pub input: PathBuf,
    /// Image to draw.
    #[arg(long)]
    pub image_id: String,
    /// SVG output file.
    #[arg(long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };

    let result = pool.install(|| match &cli.command {
        Command::Simulate(a) => commands::run_simulate(a),
        Command::Fuse(a) => commands::run_fuse(a),
        Command::Eval(a) => commands::run_eval(a),
        Command::LossWeights(a) => commands::run_loss_weights(a),
        Command::Render(a) => commands::run_render(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}
