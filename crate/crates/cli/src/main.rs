use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Data-dependent initialization and calibration of convolutional networks.
#[derive(Debug, Parser)]
#[command(name = "ddinit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Initialize weights without calibration.
    Init(InitArgs),
    /// Initialize (or load), normalize within layers and equalize between layers.
    Calibrate(CalibrateArgs),
    /// Measure change rates of existing weights.
    Measure(MeasureArgs),
    /// Train existing weights with SGD.
    Train(TrainArgs),
    /// Train several initializations with identical settings and combine the loss curves.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct NetArgs {
    /// Network description (JSON).
    #[arg(long)]
    net: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// IDX image file or `synthetic:KIND` (gaussian-noise, gabor-textures, gabor-classes).
    #[arg(long, default_value = "synthetic:gabor-textures")]
    data: String,
    /// IDX label file for IDX data.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Subtract the per-pixel mean image.
    #[arg(long)]
    mean_subtract: bool,
    /// Calibration / measurement sample count.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Gaussian,
    Xavier,
    Msra,
    Pca,
    Kmeans,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Policy {
    Fold,
    Insert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RateModeArg {
    Exact,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Loss {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Args)]
struct InitMethodArgs {
    /// Initializer.
    #[arg(long, value_enum, default_value_t = Method::Gaussian)]
    method: Method,
    /// Standard deviation for `gaussian`.
    #[arg(long, default_value_t = 0.01)]
    std: f64,
    /// Spherical k-means iterations for `kmeans`.
    #[arg(long, default_value_t = ddinit::init::DEFAULT_KMEANS_ITERS)]
    kmeans_iters: usize,
    /// Patches per layer for `pca` and `kmeans` [default: max(10000, 20 * filters)].
    #[arg(long)]
    patches: Option<usize>,
}

#[derive(Debug, Args)]
struct CalibrationArgs {
    /// Target activation mean.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    beta: f64,
    /// Damping of the between-layer corrections.
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    /// Between-layer iterations.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Skip the per-channel normalization.
    #[arg(long)]
    skip_within: bool,
    /// Skip the between-layer equalization.
    #[arg(long)]
    skip_between: bool,
    /// How a layer's scale correction is undone downstream.
    #[arg(long, value_enum, default_value_t = Policy::Insert)]
    fold_policy: Policy,
    /// Divide the top layer by the cumulative output scale afterwards.
    #[arg(long)]
    restore_output_scale: bool,
    /// Change-rate estimator.
    #[arg(long, value_enum, default_value_t = RateModeArg::Exact)]
    rate_mode: RateModeArg,
}

#[derive(Debug, Args)]
struct TrainingArgs {
    /// Base learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Training iterations.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Training loss.
    #[arg(long, value_enum, default_value_t = Loss::Softmax)]
    loss: Loss,
    /// Learning-rate drop interval in iterations.
    #[arg(long, default_value_t = 100_000)]
    step_size: usize,
    /// Learning-rate drop factor.
    #[arg(long, default_value_t = 0.1)]
    step_gamma: f64,
    /// Number of images generated for synthetic training data.
    #[arg(long, default_value_t = 5000)]
    train_samples: usize,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Output weight blob.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    method: InitMethodArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Existing weights; the initializer is skipped when given.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output weight blob.
    #[arg(long)]
    out: PathBuf,
    /// Output network description, needed when scale layers are inserted
    /// [default: OUT.net.json].
    #[arg(long)]
    out_net: Option<PathBuf>,
    #[command(flatten)]
    method: InitMethodArgs,
    #[command(flatten)]
    calibration: CalibrationArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Debug, Args)]
struct MeasureArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Weight blob.
    #[arg(long)]
    weights: PathBuf,
    /// Change-rate estimator.
    #[arg(long, value_enum, default_value_t = RateModeArg::Exact)]
    rate_mode: RateModeArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Weight blob.
    #[arg(long)]
    weights: PathBuf,
    /// Output weight blob.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Comma-separated initializations; prefix `ours-` runs the full calibration pipeline.
    #[arg(long, value_delimiter = ',', default_value = "gaussian,ours-kmeans")]
    methods: Vec<String>,
    #[command(flatten)]
    method: InitMethodArgs,
    #[command(flatten)]
    calibration: CalibrationArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Combined loss-curve CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Init(a) => commands::init(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Measure(a) => commands::measure(a),
        Command::Train(a) => commands::train(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
