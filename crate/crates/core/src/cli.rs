//! `uncmap` command line.
//!
//! Exit codes: 0 on success, 2 on usage or validation errors, 1 on runtime
//! failures. `counterexample` also exits 1 when a verdict fails.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::counterexample::{evaluate_scenarios, scenarios_csv, DEFAULT_PASSES, DEFAULT_SEED};
use crate::divergence::{DivergenceKind, DivergenceSpec, DEFAULT_EPSILON};
use crate::histogram::{HistogramSpec, DEFAULT_BINS};
use crate::io::{self, Metadata, Volume};
use crate::metrics;
use crate::sim::{self, GateEstimator, TrainConfig};
use crate::uncertainty::{self, Estimator, MaskPolicy, Reduction};
use crate::volume::ScalarVolume;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "uncmap", version, about = "Voxel-wise uncertainty maps from Monte Carlo segmentation samples")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an uncertainty map from a sample stack.
    Estimate(EstimateArgs),
    /// Threshold an uncertainty map into a 0/1 certainty mask.
    Mask(MaskArgs),
    /// Spearman rank correlation between two maps.
    Compare(CompareArgs),
    /// Run the three-scenario entropy counterexample.
    Counterexample(CounterexampleArgs),
    /// Train the mean-teacher simulator over several seeds.
    Simulate(SimulateArgs),
    /// Dice, Jaccard, HD95 and ASD between two label volumes.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Entropy,
    Bhattacharyya,
    Alpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceMethod {
    Bhattacharyya,
    Alpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReductionArg {
    Top2,
    Maxall,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    /// Sample stack (UVF stack, or NPY of shape (T, C, ...spatial)).
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// α of the α-divergence (required with --method alpha).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "top2")]
    pub reduction: ReductionArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw divergence map `D` before reorientation.
    #[arg(long)]
    pub raw_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Keep this fraction of lowest-uncertainty voxels (default 0.75).
    #[arg(long, conflicts_with = "threshold")]
    pub keep_fraction: Option<f64>,
    /// Keep voxels with uncertainty strictly below this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Also write the result as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CounterexampleArgs {
    #[arg(long, default_value_t = DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "bhattacharyya")]
    pub method: DivergenceMethod,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub estimator: Option<GateEstimator>,
    /// Number of seeds; runs use seeds `first_seed..first_seed + seeds`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub mc_passes: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub input_noise: Option<f64>,
    /// Train on the unlabeled pool with its labels (upper-bound baseline).
    #[arg(long)]
    pub label_all: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Number of classes, background included.
    #[arg(long)]
    pub classes: usize,
    /// Score class 0 as well.
    #[arg(long)]
    pub include_background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn with_path(path: &Path) -> impl Fn(io::FormatError) -> CliError + '_ {
    move |e| match e {
        io::FormatError::Io(err) => CliError::Runtime(format!("{}: {err}", path.display())),
        other => CliError::Runtime(format!("{}: {other}", path.display())),
    }
}

/// Echo of a run, written next to its outputs.
#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a C,
    config_hash: String,
}

/// Output destinations don't change what is computed, so they are left out
/// of the hash.
const OUTPUT_KEYS: [&str; 2] = ["out", "raw_out"];

fn strip_outputs(value: &mut serde_json::Value) {
    if let serde_json::Value::Object(map) = value {
        for key in OUTPUT_KEYS {
            map.remove(key);
        }
        map.values_mut().for_each(strip_outputs);
    }
}

fn config_hash<C: Serialize>(config: &C) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    strip_outputs(&mut value);
    let bytes = serde_json::to_vec(&value).expect("value serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    io::write_atomic(path, text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_manifest<C: Serialize>(path: &Path, command: &'static str, config: &C) -> Result<String, CliError> {
    let hash = config_hash(config);
    write_json(
        path,
        &Manifest {
            tool: "uncmap",
            version: VERSION,
            command,
            config,
            config_hash: hash.clone(),
        },
    )?;
    Ok(hash)
}

/// `out.uvf` → `out.uvf.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn divergence_spec(method: DivergenceMethod, alpha: Option<f64>, eps: f64) -> Result<DivergenceSpec, CliError> {
    let kind = match method {
        DivergenceMethod::Bhattacharyya => DivergenceKind::Bhattacharyya,
        DivergenceMethod::Alpha => DivergenceKind::Alpha(
            alpha.ok_or_else(|| usage("--alpha is required with --method alpha"))?,
        ),
    };
    DivergenceSpec::new(kind, eps).map_err(usage)
}

fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let estimator = match args.method {
        Method::Entropy => {
            if !(args.eps > 0.0 && args.eps <= 1e-6) {
                return Err(usage(format!("--eps must lie in (0, 1e-6], got {}", args.eps)));
            }
            Estimator::Entropy { epsilon: args.eps }
        }
        Method::Bhattacharyya | Method::Alpha => {
            let m = if args.method == Method::Alpha {
                DivergenceMethod::Alpha
            } else {
                DivergenceMethod::Bhattacharyya
            };
            Estimator::Divergence {
                hist: HistogramSpec::new(args.bins).map_err(usage)?,
                div: divergence_spec(m, args.alpha, args.eps)?,
                reduction: match args.reduction {
                    ReductionArg::Top2 => Reduction::Top2,
                    ReductionArg::Maxall => Reduction::MaxAll,
                },
            }
        }
    };
    let stack = io::read_stack(&args.samples).map_err(with_path(&args.samples))?;
    let map = estimator.map(&stack);
    let hash = write_manifest(&sidecar(&args.out), "estimate", args)?;
    let meta = Metadata {
        estimator: Some(serde_json::to_value(map.estimator()).map_err(runtime)?),
        config_hash: Some(hash),
    };
    io::write_volume(&args.out, &Volume::Scalar(map.volume().clone()), &meta)
        .map_err(with_path(&args.out))?;
    if let Some(raw_out) = &args.raw_out {
        let raw = map
            .raw()
            .ok_or_else(|| usage("--raw-out needs a divergence method"))?;
        io::write_volume(raw_out, &Volume::Scalar(raw.clone()), &meta).map_err(with_path(raw_out))?;
    }
    log::info!("wrote {} ({} voxels)", args.out.display(), map.values().len());
    Ok(())
}

fn mask(args: &MaskArgs) -> Result<(), CliError> {
    let policy = match args.threshold {
        Some(t) => MaskPolicy::absolute(t),
        None => MaskPolicy::quantile(args.keep_fraction.unwrap_or(uncertainty::DEFAULT_KEEP_FRACTION)),
    }
    .map_err(usage)?;
    let (map, meta) = io::read_scalar(&args.map).map_err(with_path(&args.map))?;
    if let Some(v) = map.values().iter().position(|&x| x < 0.0) {
        return Err(runtime(format!(
            "{}: negative uncertainty at voxel {v}",
            args.map.display()
        )));
    }
    let values = uncertainty::mask_values(map.values(), &policy).map_err(usage)?;
    let kept = values.iter().filter(|&&m| m == 1.0).count();
    let mask = ScalarVolume::new(map.shape().clone(), values).map_err(runtime)?;
    let hash = write_manifest(&sidecar(&args.out), "mask", args)?;
    let meta = Metadata {
        estimator: meta.estimator,
        config_hash: Some(hash),
    };
    io::write_volume(&args.out, &Volume::Scalar(mask), &meta).map_err(with_path(&args.out))?;
    log::info!("kept {kept} of {} voxels", map.values().len());
    Ok(())
}

#[derive(Serialize)]
struct CompareResult {
    spearman: f64,
}

fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let (a, _) = io::read_scalar(&args.a).map_err(with_path(&args.a))?;
    let (b, _) = io::read_scalar(&args.b).map_err(with_path(&args.b))?;
    if a.shape() != b.shape() {
        return Err(runtime(format!(
            "maps have different shapes: {:?} vs {:?}",
            a.shape().dims(),
            b.shape().dims()
        )));
    }
    let result = CompareResult {
        spearman: uncertainty::spearman(a.values(), b.values()),
    };
    println!("{}", serde_json::to_string(&result).map_err(runtime)?);
    if let Some(out) = &args.out {
        write_manifest(&sidecar(out), "compare", args)?;
        write_json(out, &result)?;
    }
    Ok(())
}

fn counterexample(args: &CounterexampleArgs) -> Result<bool, CliError> {
    let hspec = HistogramSpec::new(args.bins).map_err(usage)?;
    let dspec = divergence_spec(args.method, args.alpha, args.eps)?;
    let report = evaluate_scenarios(args.passes, &hspec, &dspec, args.seed).map_err(usage)?;
    ensure_dir(&args.out)?;
    write_manifest(&args.out.join("manifest.json"), "counterexample", args)?;
    write_text(&args.out.join("scenarios.csv"), &scenarios_csv(&report))?;
    write_json(&args.out.join("verdicts.json"), &report)?;
    for (name, ok) in [
        ("V1 entropy prefers middle", report.v1_entropy_prefers_middle),
        ("V2 divergence flags middle", report.v2_divergence_flags_middle),
        ("V3 variance blindness", report.v3_variance_blindness),
    ] {
        eprintln!("{name}: {}", if ok { "holds" } else { "FAILS" });
    }
    Ok(report.all_hold)
}

#[derive(Serialize)]
struct SimulateResolved<'a> {
    args: &'a SimulateArgs,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    mean_dice: f64,
    mean_jaccard: f64,
}

#[derive(Serialize)]
struct SimulateSummary {
    estimator: GateEstimator,
    runs: Vec<SeedSummary>,
    median_mean_dice: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn resolve_train_config(args: &SimulateArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = args.estimator {
        cfg.estimator = e;
    }
    if let Some(x) = args.lambda {
        cfg.lambda = x;
    }
    if let Some(x) = args.epochs {
        cfg.epochs = x;
    }
    if let Some(x) = args.keep_fraction {
        cfg.keep_fraction = x;
        cfg.threshold = None;
    }
    if args.threshold.is_some() {
        cfg.threshold = args.threshold;
    }
    if let Some(x) = args.mc_passes {
        cfg.mc_passes = x;
    }
    if let Some(x) = args.dropout {
        cfg.dropout = x;
    }
    if let Some(x) = args.input_noise {
        cfg.input_noise = x;
    }
    if args.label_all {
        cfg.label_all = true;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let cfg = resolve_train_config(args)?;
    ensure_dir(&args.out)?;
    write_manifest(
        &args.out.join("manifest.json"),
        "simulate",
        &SimulateResolved {
            args,
            train: &cfg,
        },
    )?;
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let reports = seeds
        .par_iter()
        .map(|&seed| {
            let started = std::time::Instant::now();
            let report = sim::train(&cfg, seed).map_err(runtime)?;
            log::info!(
                "seed {seed}: mean dice {:.4} in {:.1?}",
                report.final_metrics.mean_dice,
                started.elapsed()
            );
            let dir = args.out.join(format!("seed_{seed}"));
            ensure_dir(&dir)?;
            write_json(&dir.join("runreport.json"), &report)?;
            write_text(&dir.join("percurve.csv"), &report.curve_csv())?;
            Ok(report)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let runs: Vec<SeedSummary> = reports
        .iter()
        .map(|r| SeedSummary {
            seed: r.seed,
            mean_dice: r.final_metrics.mean_dice,
            mean_jaccard: r.final_metrics.mean_jaccard,
        })
        .collect();
    let dice: Vec<f64> = runs.iter().map(|r| r.mean_dice).collect();
    let summary = SimulateSummary {
        estimator: cfg.estimator,
        median_mean_dice: median(&dice),
        runs,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime)?);
    Ok(())
}

fn metrics_cmd(args: &MetricsArgs) -> Result<(), CliError> {
    if args.classes < 2 {
        return Err(usage(format!("--classes must be at least 2, got {}", args.classes)));
    }
    let pred = io::read_labels(&args.pred, Some(args.classes)).map_err(with_path(&args.pred))?;
    let gt = io::read_labels(&args.gt, Some(args.classes)).map_err(with_path(&args.gt))?;
    let first = if args.include_background { 0 } else { 1 };
    let classes: Vec<usize> = (first..args.classes).collect();
    let report = metrics::evaluate(&pred, &gt, &classes).map_err(runtime)?;
    write_manifest(&sidecar(&args.out), "metrics", args)?;
    write_json(&args.out, &report)?;
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("UNCMAP_LOG")
        .format_timestamp(None)
        .try_init();
}

/// Sizes the global worker pool from `UNCMAP_THREADS` (unset or 0 = auto).
pub fn configure_threads() {
    let n = std::env::var("UNCMAP_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Executes a parsed command.
pub fn execute(cli: &Cli) -> Result<bool, CliError> {
    match &cli.command {
        Command::Estimate(a) => estimate(a).map(|_| true),
        Command::Mask(a) => mask(a).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
        Command::Counterexample(a) => counterexample(a),
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Metrics(a) => metrics_cmd(a).map(|_| true),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            e.exit_code()
        }
    }
}
