//! `crowdkit` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crowdkit::ingest::{CategoryGroup, Split, SplitRatios, DEFAULT_MIN_COUNT};
use crowdkit::model::ChannelScale;
use crowdkit::synth::Regime;
use crowdkit::Error;

const THREADS_ENV: &str = "CROWDKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "crowdkit", version, about = "Crowd counting with scale-aware context attention")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn a bounding-box annotation file into a points file.
    Convert(ConvertArgs),
    /// Draw a density map (CKDM) from a points file.
    Density(DensityArgs),
    /// Measure scale variation and isolated clusters for every image.
    Stats(StatsArgs),
    /// Write one manifest per CV bucket and per DVI bucket.
    Buckets(BucketsArgs),
    /// Drop sparse images and assign train/val/test splits.
    Split(SplitArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Count the images of a split and report MAE/MSE.
    Eval(EvalArgs),
    /// Render a CKDM density map as a grayscale PGM.
    Render(RenderArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelKind {
    Fixed,
    Adaptive,
}

#[derive(Args, Debug)]
struct KernelArgs {
    /// Ground-truth kernel.
    #[arg(long, value_enum, default_value = "fixed")]
    kernel: KernelKind,
    /// Spread of the fixed kernel in pixels.
    #[arg(long, default_value_t = crowdkit::density::DEFAULT_FIXED_SIGMA)]
    sigma: f64,
    /// Adaptive kernel: σ = beta × mean distance to the k nearest points.
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    /// Adaptive kernel neighbor count.
    #[arg(long = "knn", default_value_t = 3)]
    knn: usize,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Which categories to keep and where to place their points.
    #[arg(long, value_parser = parse_group)]
    mode: CategoryGroup,
    /// Annotation CSV (bb_left,bb_top,bb_width,bb_height,score,category,truncation,occlusion).
    #[arg(long = "in")]
    input: PathBuf,
    /// Points CSV (col,row).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DensityArgs {
    /// Points CSV (col,row).
    #[arg(long)]
    points: PathBuf,
    /// Take the map size from this PPM/PGM image.
    #[arg(long, conflicts_with_all = ["height", "width"])]
    image: Option<PathBuf>,
    #[arg(long, requires = "width")]
    height: Option<usize>,
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Sum-pool the map by this factor in both directions.
    #[arg(long, default_value_t = 1)]
    pool: usize,
    /// Output CKDM file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Dataset root holding images/ and annotations/.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, value_parser = parse_group, default_value = "people")]
    group: CategoryGroup,
    /// Per-image reports as a JSON array.
    #[arg(long)]
    out_json: PathBuf,
    /// One summary row per image.
    #[arg(long)]
    out_csv: PathBuf,
    /// Neighbors averaged per object.
    #[arg(long, default_value_t = crowdkit::stats::DEFAULT_NEIGHBORS)]
    neighbors: usize,
    #[arg(long, default_value_t = crowdkit::stats::DEFAULT_CLUSTERS)]
    clusters: usize,
    /// Extra random k-means restarts.
    #[arg(long, default_value_t = crowdkit::stats::DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = 8.0)]
    scale_bin_width: f64,
    #[arg(long, default_value_t = 16.0)]
    distance_bin_width: f64,
    #[arg(long, default_value_t = 16)]
    histogram_bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BucketsArgs {
    /// Reports written by `stats --out-json`.
    #[arg(long)]
    stats: PathBuf,
    /// Split manifest; when given, only its images are bucketed and they
    /// keep their split. Otherwise every image is listed as `test`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for cv_<b>.csv and dvi_<b>.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, value_parser = parse_group, default_value = "people")]
    group: CategoryGroup,
    /// Images with fewer points are dropped.
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    min_count: usize,
    /// train,val,test fractions.
    #[arg(long, value_parser = parse_ratios, default_value = "0.7,0.1,0.2")]
    ratios: SplitRatios,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to <root>/manifest.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Width multiplier on the reference network, e.g. 1/8.
    #[arg(long, value_parser = parse_scale, default_value = "1")]
    scale: ChannelScale,
    /// Input channels: 3 (RGB) or 1 (gray).
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Standard deviation of the Gaussian init outside the stem.
    #[arg(long, default_value_t = 0.01)]
    init_scale: f64,
    /// Model settings file (key = value); overrides the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    root: PathBuf,
    /// Defaults to <root>/manifest.csv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "train")]
    split: Split,
    #[arg(long, value_parser = parse_group, default_value = "people")]
    group: CategoryGroup,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Start from these weights instead of a fresh init.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Accept a weight file holding only stem parameters.
    #[arg(long, requires = "weights")]
    stem_only: bool,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = crowdkit::train::DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Probability of mirroring a sample at each step.
    #[arg(long, default_value_t = 0.0)]
    flip: f64,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives model.cfg, model.ckwt, train_log.csv and per-epoch checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    root: PathBuf,
    /// Defaults to <root>/manifest.csv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    #[arg(long, value_parser = parse_group, default_value = "people")]
    group: CategoryGroup,
    /// Model settings written by `train` (model.cfg).
    #[arg(long)]
    config: PathBuf,
    /// Weights (CKWT).
    #[arg(long)]
    weights: PathBuf,
    /// Reports from `stats`, to break results down by bucket.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Report as JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    min_points: usize,
    #[arg(long, default_value_t = 30)]
    max_points: usize,
    /// scale-var, isolated or mixed.
    #[arg(long, value_parser = parse_regime, default_value = "mixed")]
    regime: Regime,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_group(s: &str) -> Result<CategoryGroup, Error> {
    s.parse()
}

fn parse_ratios(s: &str) -> Result<SplitRatios, Error> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, Error> {
    s.parse()
}

fn parse_scale(s: &str) -> Result<ChannelScale, Error> {
    s.parse()
}

fn parse_regime(s: &str) -> Result<Regime, Error> {
    s.parse()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
