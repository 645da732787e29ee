//! `donn`: train, evaluate, inspect and export diffractive optical networks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use donn_core::bench::{bench_csv, bench_kernels, BenchConfig};
use donn_core::codesign::{to_system, DeviceProfile};
use donn_core::config::RunConfig;
use donn_core::dse::{
    candidate_grid, dse_recommend, gbr_fit, read_sweep_csv, sweep_collect, GbrModel, GbrParams, Proxy, SweepGrid,
};
use donn_core::io::{write_pgm, Dataset};
use donn_core::model::{Model, RunMode, Simulator};
use donn_core::optics::{TransferCache, Workspace};
use donn_core::train::{evaluate, fit, metrics_csv, noise_eval};

#[derive(Parser)]
#[command(name = "donn", version, about = "Diffractive optical neural network emulator")]
struct Cli {
    /// Worker threads for batch evaluation (0 = all cores, 1 = deterministic single thread).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Classification accuracy of a saved model on the config's test split.
    Eval(EvalArgs),
    /// Write phase masks and per-plane intensities as PGM images.
    View(ViewArgs),
    /// Train proxy models over a (wavelength, unit size, distance) grid.
    DseSweep(SweepArgs),
    /// Fit a boosted-tree surrogate to sweep results.
    DseFit(FitArgs),
    /// Recommend unit size and distance for a wavelength.
    DseRecommend(RecommendArgs),
    /// Map a model onto device control levels.
    Export(ExportArgs),
    /// Time the transform kernels and the forward pass.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (default: the model path with a `.csv` extension).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Config naming the test data.
    #[arg(long)]
    config: PathBuf,
    /// Detector noise bound as a fraction of the peak intensity.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also propagate this test sample of the config and write every plane.
    #[arg(long, requires = "config")]
    sample: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Proxy template: grid size, depth, training setup and data.
    #[arg(long)]
    config: PathBuf,
    /// Sweep CSV; existing rows are kept and skipped.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    wavelengths: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    unit_sizes: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    distances: Vec<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the full 3500-tree ensemble instead of the 300-tree default.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    trees: Option<usize>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wavelength: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    unit_sizes: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    distances: Vec<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Device profile (`index, phase, amplitude` per line).
    #[arg(long)]
    device: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    depths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: &Path, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn test_split(cfg: &RunConfig) -> Result<Dataset> {
    cfg.test_data()?.context("config names no test data")
}

fn train(args: TrainArgs, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(&args.config, workers)?;
    let train = cfg.train_data()?;
    let test = cfg.test_data()?;
    let mut model = cfg.build_model()?;
    for w in model.config.validity_warnings() {
        log::warn!("{w}");
    }
    let history = fit(&mut model, &train, test.as_ref(), &cfg.train_config(), |m, _| {
        match m.test_acc {
            Some(t) => println!("epoch {} loss {:.6} train_acc {:.4} test_acc {:.4}", m.epoch, m.train_loss, m.train_acc, t),
            None => println!("epoch {} loss {:.6} train_acc {:.4}", m.epoch, m.train_loss, m.train_acc),
        }
    })?;
    model.save(&args.out)?;
    let metrics = args.metrics.unwrap_or_else(|| args.out.with_extension("csv"));
    fs::write(&metrics, metrics_csv(&history)).with_context(|| format!("writing {}", metrics.display()))?;
    println!("model {} metrics {}", args.out.display(), metrics.display());
    Ok(())
}

fn eval(args: EvalArgs, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(&args.config, workers)?;
    let model = Model::load(&args.model)?;
    let test = test_split(&cfg)?;
    let acc = match args.noise {
        Some(b) => noise_eval(&model, &test, b, args.noise_seed, cfg.workers)?,
        None => evaluate(&model, &test, cfg.workers)?,
    };
    println!("accuracy {acc}");
    Ok(())
}

fn view(args: ViewArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let n = model.size();
    let multi = model.channels.len() > 1;
    let name = |stem: &str, ch: usize, i: usize| {
        if multi {
            args.out.join(format!("{stem}_c{ch}_{i}.pgm"))
        } else {
            args.out.join(format!("{stem}_{i}.pgm"))
        }
    };
    let mut written = 0;
    for (ch, stack) in model.channels.iter().enumerate() {
        for (l, layer) in stack.iter().enumerate() {
            write_pgm(&layer.phase_map(n, model.device.as_ref()), name("phase", ch, l))?;
            written += 1;
        }
    }
    if let (Some(i), Some(cfg)) = (args.sample, &args.config) {
        let cfg = RunConfig::load(cfg)?;
        let test = test_split(&cfg)?;
        let sample = test.samples.get(i).with_context(|| format!("test split has {} samples", test.len()))?;
        let planes = sample.encode(&model.config.grid)?;
        let mut cache = TransferCache::new();
        let sim = Simulator::new(&model, &mut cache, RunMode::eval())?;
        let mut ws = Workspace::new();
        for ch in 0..model.channels.len() {
            for (k, map) in sim.plane_intensities(&planes, ch, &mut ws)?.iter().enumerate() {
                write_pgm(map, name("plane", ch, k))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} images to {}", args.out.display());
    Ok(())
}

fn dse_sweep(args: SweepArgs, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(&args.config, workers)?;
    let proxy = Proxy {
        size: cfg.sys_size,
        depth: cfg.depth,
        approx: cfg.approx,
        padded: cfg.padded,
        detector: cfg.detector()?,
        gamma: cfg.gamma,
        channels: cfg.channels,
        seed: cfg.seed,
        train: cfg.train_config(),
    };
    let grid = SweepGrid { wavelengths: args.wavelengths, unit_sizes: args.unit_sizes, distances: args.distances };
    let train = cfg.train_data()?;
    let test = test_split(&cfg)?;
    let points = sweep_collect(&grid, &proxy, &train, &test, Some(&args.out))?;
    println!("{} of {} points in {}", points.len(), grid.len(), args.out.display());
    Ok(())
}

fn dse_fit(args: FitArgs) -> Result<()> {
    let points = read_sweep_csv(&args.sweep)?;
    let mut params = if args.full { GbrParams::full() } else { GbrParams::desk() };
    if let Some(t) = args.trees {
        params.n_estimators = t;
    }
    let model = gbr_fit(&points, &params)?;
    model.save(&args.out)?;
    println!("fitted {} trees on {} points", model.trees.len(), points.len());
    Ok(())
}

fn dse_recommend_cmd(args: RecommendArgs) -> Result<()> {
    let model = GbrModel::load(&args.model)?;
    let r = dse_recommend(&model, args.wavelength, &candidate_grid(&args.unit_sizes, &args.distances))?;
    println!("unit_size_m={} distance_m={} predicted_accuracy={:.4}", r.unit_size, r.distance, r.accuracy);
    if r.extrapolated {
        eprintln!("warning: wavelength lies outside the sweep's wavelength range");
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let device = DeviceProfile::load(&args.device)?;
    let d = to_system(&model, &device, &args.out)?;
    println!("wrote {} layers of {} levels to {}", d.layers.len(), d.levels, args.out.display());
    Ok(())
}

fn bench(args: BenchArgs, workers: Option<usize>) -> Result<()> {
    let cfg = BenchConfig {
        sizes: args.sizes,
        depths: args.depths,
        batch: args.batch,
        repetitions: args.reps,
        workers: workers.unwrap_or(0),
        seed: 0,
    };
    let csv = bench_csv(&bench_kernels(&cfg)?);
    match args.out {
        Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Train(a) => train(a, workers),
        Command::Eval(a) => eval(a, workers),
        Command::View(a) => view(a),
        Command::DseSweep(a) => dse_sweep(a, workers),
        Command::DseFit(a) => dse_fit(a),
        Command::DseRecommend(a) => dse_recommend_cmd(a),
        Command::Export(a) => export(a),
        Command::Bench(a) => bench(a, workers),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
