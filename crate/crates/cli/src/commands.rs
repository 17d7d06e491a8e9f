use std::path::{Path, PathBuf};

use ddinit::io::{self, Dataset, ReportFormat, SyntheticKind};
use ddinit::rng::derive_seed;
use ddinit::stats::summarize;
use ddinit::train::sgd_train;
use ddinit::{
    calibrate as run_calibration, change_rates, initialize, CalibrationConfig, Dims, Error, FoldPolicy, InitConfig,
    InitMethod, LossKind, NetworkGraph, RateConfig, RateMode, Result, TrainConfig, TrainHistory, WeightStore,
};

use crate::{
    CalibrateArgs, CalibrationArgs, CompareArgs, DataArgs, Format, InitArgs, InitMethodArgs, Loss, MeasureArgs, Method,
    Policy, RateModeArg, TrainArgs, TrainingArgs,
};

fn format_of(f: Format) -> ReportFormat {
    match f {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    }
}

fn rate_mode(m: RateModeArg) -> RateMode {
    match m {
        RateModeArg::Exact => RateMode::ExactEmpirical,
        RateModeArg::Decoupled => RateMode::DecoupledApproximation,
    }
}

/// Load `count` images shaped like the network input.
fn load_data(args: &DataArgs, dims: Dims, count: usize) -> Result<Dataset> {
    let mut data = match args.data.strip_prefix("synthetic:") {
        Some(kind) => {
            let kind: SyntheticKind = kind.parse()?;
            io::gen_synthetic(count, dims, derive_seed(args.seed, "data"), kind)?
        }
        None => {
            let path = Path::new(&args.data);
            let data = io::load_idx(path, args.labels.as_deref())?;
            let shape = &data.images.shape()[1..];
            if shape != dims.as_slice() {
                return Err(Error::Config(format!(
                    "{} holds images of shape {shape:?}, the network expects {dims:?}",
                    path.display()
                )));
            }
            data
        }
    };
    if args.mean_subtract {
        data.subtract_mean();
    }
    Ok(data)
}

fn calibration_batch(args: &DataArgs, graph: &NetworkGraph) -> Result<Dataset> {
    if args.samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    Ok(load_data(args, graph.input_dims(), args.samples)?.take(args.samples))
}

fn init_config(m: &InitMethodArgs, method: Method, seed: u64) -> InitConfig {
    let method = match method {
        Method::Gaussian => InitMethod::Gaussian { std: m.std },
        Method::Xavier => InitMethod::Xavier,
        Method::Msra => InitMethod::Msra,
        Method::Pca => InitMethod::Pca,
        Method::Kmeans => InitMethod::Kmeans { iters: m.kmeans_iters },
    };
    let mut c = InitConfig::new(method, derive_seed(seed, "init"));
    c.patch_count = m.patches;
    c
}

fn calibration_config(a: &CalibrationArgs, samples: usize, seed: u64) -> CalibrationConfig {
    CalibrationConfig {
        beta: a.beta,
        alpha: a.alpha,
        iterations: a.iters,
        batch_size: samples,
        seed: derive_seed(seed, "calibrate"),
        fold_policy: match a.fold_policy {
            Policy::Fold => FoldPolicy::FoldIfHomogeneous,
            Policy::Insert => FoldPolicy::AlwaysInsertScaleLayer,
        },
        rate_mode: rate_mode(a.rate_mode),
        draws_per_image: 1,
        skip_within: a.skip_within,
        skip_between: a.skip_between,
        restore_output_scale: a.restore_output_scale,
    }
}

fn load_checked_weights(path: &Path, graph: &NetworkGraph) -> Result<WeightStore> {
    let w = io::load_weights(path)?;
    w.validate(graph)?;
    Ok(w)
}

pub fn init(a: InitArgs) -> Result<()> {
    let graph = io::load_netspec(&a.net.net)?;
    let config = init_config(&a.method, a.method.method, a.data.seed);
    let batch = match a.method.method {
        Method::Pca | Method::Kmeans => Some(calibration_batch(&a.data, &graph)?),
        _ => None,
    };
    let weights = initialize(&graph, batch.as_ref().map(|d| &d.images), &config)?;
    io::save_weights(&weights, &a.out)?;
    println!("wrote {} layers to {}", weights.len(), a.out.display());
    Ok(())
}

fn default_net_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".net.json");
    PathBuf::from(s)
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let graph = io::load_netspec(&a.net.net)?;
    let weights = a
        .weights
        .as_deref()
        .map(|p| load_checked_weights(p, &graph))
        .transpose()?;
    let batch = calibration_batch(&a.data, &graph)?;
    let init = init_config(&a.method, a.method.method, a.data.seed);
    let config = calibration_config(&a.calibration, a.data.samples, a.data.seed);
    let c = run_calibration(&graph, weights, &batch.images, &init, &config)?;

    io::save_weights(&c.weights, &a.out)?;
    let canonical = io::serialize_netspec(&c.graph);
    if canonical != io::serialize_netspec(&graph) || a.out_net.is_some() {
        let path = a.out_net.clone().unwrap_or_else(|| default_net_path(&a.out));
        io::save_netspec(&c.graph, &path)?;
        println!("wrote network to {}", path.display());
    }
    if let Some(path) = &a.report.report {
        match &c.trace {
            Some(trace) => io::write_trace(trace, path, format_of(a.report.format))?,
            None => io::write_report(&c.after, path, format_of(a.report.format))?,
        }
    }
    println!("before\n{}\n", summarize(&c.before));
    println!("after\n{}", summarize(&c.after));
    if let Some(trace) = &c.trace {
        let restored = if trace.output_scale_restored { " (restored)" } else { "" };
        println!("cumulative output scale {:.6}{restored}", trace.output_scale);
    }
    println!("wrote weights to {}", a.out.display());
    Ok(())
}

pub fn measure(a: MeasureArgs) -> Result<()> {
    let graph = io::load_netspec(&a.net.net)?;
    let weights = load_checked_weights(&a.weights, &graph)?;
    let batch = calibration_batch(&a.data, &graph)?;
    let config = RateConfig {
        mode: rate_mode(a.rate_mode),
        seed: derive_seed(a.data.seed, "measure"),
        draws_per_image: 1,
    };
    let report = change_rates(&graph, &weights, &batch.images, &config)?;
    if let Some(path) = &a.report.report {
        io::write_report(&report, path, format_of(a.report.format))?;
    }
    println!("{}", summarize(&report));
    Ok(())
}

fn train_config(t: &TrainingArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: t.lr,
        momentum: t.momentum,
        step_gamma: t.step_gamma,
        step_size: t.step_size,
        batch_size: t.batch,
        max_iters: t.max_iters,
        loss: match t.loss {
            Loss::Softmax => LossKind::SoftmaxCrossEntropy,
            Loss::Sigmoid => LossKind::SigmoidCrossEntropy,
        },
        seed: derive_seed(seed, "train"),
        ..TrainConfig::default()
    }
}

fn training_data(data: &DataArgs, t: &TrainingArgs, graph: &NetworkGraph) -> Result<Dataset> {
    let d = load_data(data, graph.input_dims(), t.train_samples)?;
    if d.labels.is_none() {
        return Err(Error::Config(format!(
            "training needs labels: pass --labels or use synthetic:gabor-classes (got {})",
            data.data
        )));
    }
    Ok(d)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let graph = io::load_netspec(&a.net.net)?;
    let weights = load_checked_weights(&a.weights, &graph)?;
    let data = training_data(&a.data, &a.training, &graph)?;
    let (weights, history) = sgd_train(&graph, weights, &data, &train_config(&a.training, a.data.seed))?;
    io::save_weights(&weights, &a.out)?;
    if let Some(path) = &a.report.report {
        io::write_history(&history, path, format_of(a.report.format))?;
    }
    if let Some(last) = history.last() {
        println!("iteration {} loss {:.6}", last.iteration, last.loss);
    }
    println!("wrote weights to {}", a.out.display());
    Ok(())
}

fn parse_method(s: &str) -> Result<(bool, Method)> {
    let (calibrated, base) = match s.strip_prefix("ours-") {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let method = match base {
        "gaussian" => Method::Gaussian,
        "xavier" => Method::Xavier,
        "msra" => Method::Msra,
        "pca" => Method::Pca,
        "kmeans" => Method::Kmeans,
        other => return Err(Error::Config(format!("unknown method `{other}` in --methods"))),
    };
    Ok((calibrated, method))
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let graph = io::load_netspec(&a.net.net)?;
    let methods: Vec<(bool, Method)> = a.methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()?;
    let data = training_data(&a.data, &a.training, &graph)?;
    if a.data.samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let batch = data.take(a.data.samples);
    let tc = train_config(&a.training, a.data.seed);
    let mut runs: Vec<(String, TrainHistory)> = Vec::new();
    for (name, &(calibrated, method)) in a.methods.iter().zip(&methods) {
        let init = init_config(&a.method, method, a.data.seed);
        let (net, weights) = if calibrated {
            let config = calibration_config(&a.calibration, a.data.samples, a.data.seed);
            let c = run_calibration(&graph, None, &batch.images, &init, &config)?;
            (c.graph, c.weights)
        } else {
            (graph.clone(), initialize(&graph, Some(&batch.images), &init)?)
        };
        let (_, history) = sgd_train(&net, weights, &data, &tc)?;
        if let Some(last) = history.last() {
            println!("{name:<16} iteration {} loss {:.6}", last.iteration, last.loss);
        }
        runs.push((name.clone(), history));
    }
    if let Some(path) = &a.report {
        io::write_loss_curves(&runs, path)?;
    }
    Ok(())
}
