//! Command line front end. Every invocation that gets past argument parsing
//! writes one JSON run manifest next to its outputs, also on failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::disturbance::{log_ratio_from_frames, mahalanobis_metric, threshold_delineate, MetricConfig};
use crate::error::{bail, Error, Result};
use crate::evaluation::{emit_comparison, emit_report};
use crate::inference::{sweep_estimate, SweepConfig};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::preprocess::{clip_array, despeckle_array, despeckle_tv, logit_array, PreprocessConfig};
use crate::protocol::{ablation_csv, evaluate_forecaster, evaluate_log_ratio, run_ablation, AblationGrid, BenchmarkConfig};
use crate::raster::{
    read_container, read_estimate, read_mask, read_metric, read_rts_checked, write_estimate, write_mask, write_metric,
    write_rts, ValueCheck,
};
use crate::selftest::run_selftest;
use crate::synth::{generate, generate_training_corpus_tiles, CorpusManifest, SynthConfig, CORPUS_TILE};
use crate::training::{train, write_loss_curve, Corpus, TrainConfig};

pub const THREADS_ENV: &str = "SARDIST_THREADS";
pub const RUN_MANIFEST: &str = "run_manifest.json";
/// Preprocessing used at training time, stored beside the checkpoint.
pub const CHECKPOINT_PREPROCESS: &str = "preprocess.json";

#[derive(Debug, Parser)]
#[command(name = "sardist", version, about = "Self-supervised disturbance mapping for SAR backscatter time series")]
pub struct Cli {
    /// Worker threads. Takes precedence over SARDIST_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object with optional sections synth, preprocess, model, train,
    /// sweep, metric, benchmark.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run manifest location; defaults to a file beside the outputs.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with its truth mask, or a training corpus.
    Synth(SynthArgs),
    /// Clip and TV-despeckle a stack.
    Despeckle(DespeckleArgs),
    /// Train a forecaster on a corpus manifest.
    Train(TrainArgs),
    /// Sweep a checkpoint over a stack and write the forecast mean and sigma.
    Estimate(EstimateArgs),
    /// Score a post-event image against a forecast or a pre-event median.
    Metric(MetricArgs),
    /// Threshold a metric map into a binary mask.
    Delineate(DelineateArgs),
    /// Two-image evaluation of a checkpoint and the log-ratio baseline.
    Eval(EvalArgs),
    /// Train and evaluate one preset grid and write a summary table.
    Ablate(AblateArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    /// TV weight in dB.
    #[arg(long)]
    pub tv_weight: Option<f64>,
    #[arg(long)]
    pub tv_iters: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    /// Accept any finite input value and clip instead of rejecting values
    /// outside (0, 1).
    #[arg(long)]
    pub allow_raw: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene output (.rts).
    #[arg(long, required_unless_present = "corpus", requires = "mask")]
    pub out: Option<PathBuf>,
    /// Truth mask output (.rts).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Write this many undisturbed training sequences instead of a scene.
    #[arg(long, requires = "out_dir", conflicts_with = "out")]
    pub corpus: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Corpus tile size in pixels.
    #[arg(long, default_value_t = CORPUS_TILE)]
    pub tile: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub num_steps: Option<usize>,
    #[arg(long)]
    pub looks: Option<f64>,
    #[arg(long)]
    pub disturbance_fraction: Option<f64>,
    #[arg(long)]
    pub disturbance_delta_db: Option<f64>,
    #[arg(long)]
    pub seasonal_amplitude_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DespeckleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pre: PreprocessArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Transformer,
    Gru,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest written by `synth --corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<KindArg>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_after_decay: Option<f64>,
    #[arg(long)]
    pub decay_epoch: Option<usize>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub t_min: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Sampling and dropout seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Despeckle the corpus before the logit transform.
    #[arg(long)]
    pub despeckle: Option<bool>,
    #[command(flatten)]
    pub pre: PreprocessArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Baseline stack; the forecast is for the acquisition after its last frame.
    #[arg(long)]
    pub input: PathBuf,
    /// Use only the first N frames of the input.
    #[arg(long)]
    pub baseline_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Mean and sigma outputs.
    #[arg(long, required = true, num_args = 2, value_names = ["MU", "SIGMA"])]
    pub out: Vec<PathBuf>,
    /// Defaults to the checkpoint's training setting.
    #[arg(long)]
    pub despeckle: Option<bool>,
    #[command(flatten)]
    pub pre: PreprocessArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricKind {
    Mahalanobis,
    Logratio,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    #[arg(long, value_enum)]
    pub kind: MetricKind,
    /// Forecast mean (mahalanobis).
    #[arg(long, required_if_eq("kind", "mahalanobis"))]
    pub mu: Option<PathBuf>,
    /// Forecast sigma (mahalanobis).
    #[arg(long, required_if_eq("kind", "mahalanobis"))]
    pub sigma: Option<PathBuf>,
    /// Pre-event frames (logratio).
    #[arg(long, required_if_eq("kind", "logratio"))]
    pub pre: Option<PathBuf>,
    /// File holding the post-event image.
    #[arg(long)]
    pub post: PathBuf,
    /// Frame of the post file to score; defaults to the last.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to true for mahalanobis and false for logratio.
    #[arg(long)]
    pub despeckle: Option<bool>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
}

#[derive(Debug, Args)]
pub struct DelineateArgs {
    #[arg(long)]
    pub metric: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stack whose last frame is post-event and second-to-last is a
    /// held-out pre-event frame.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub max_points: usize,
    /// Defaults to the checkpoint's training setting.
    #[arg(long)]
    pub despeckle: Option<bool>,
    #[arg(long, default_value_t = false)]
    pub log_ratio_despeckle: bool,
    #[command(flatten)]
    pub pre: PreprocessArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    InputPatch,
    ModelSize,
    LearningRate,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: GridArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Side of the square evaluation scene.
    #[arg(long)]
    pub scene_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Gradient gate on the default-size transformer.
    #[arg(long)]
    pub full: bool,
    /// Directory for selftest.json and the run manifest; defaults to the
    /// working directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Typed configuration sections accepted by `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: Option<SynthConfig>,
    pub preprocess: Option<PreprocessConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub sweep: Option<SweepConfig>,
    pub metric: Option<MetricConfig>,
    pub benchmark: Option<BenchmarkConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => serde_json::from_slice(&crate::error::read_file(p)?)
                .map_err(|e| Error::Validation(format!("{}: {e}", p.display()))),
            None => Ok(Self::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub status: String,
    pub error: Option<String>,
    pub exit_code: i32,
    pub duration_secs: f64,
}

impl RunManifest {
    fn new(subcommand: &str, threads: usize) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            threads,
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "running".into(),
            error: None,
            exit_code: 0,
            duration_secs: 0.0,
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }
}

/// `--threads`, then `SARDIST_THREADS`, then every available core.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        bail!(Validation, "thread count must be at least 1");
    }
    Ok(n)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_else(|| OsString::from("output"));
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn manifest_path(cmd: &Command) -> PathBuf {
    match cmd {
        Command::Synth(a) => match (&a.out, &a.out_dir) {
            (Some(out), _) => sibling_manifest(out),
            (None, Some(dir)) => dir.join(RUN_MANIFEST),
            (None, None) => PathBuf::from(RUN_MANIFEST),
        },
        Command::Despeckle(a) => sibling_manifest(&a.out),
        Command::Train(a) => a.out.join(RUN_MANIFEST),
        Command::Estimate(a) => a.out.first().map_or_else(|| PathBuf::from(RUN_MANIFEST), |p| sibling_manifest(p)),
        Command::Metric(a) => sibling_manifest(&a.out),
        Command::Delineate(a) => sibling_manifest(&a.out),
        Command::Eval(a) => a.out_dir.join(RUN_MANIFEST),
        Command::Ablate(a) => a.out_dir.join(RUN_MANIFEST),
        Command::Selftest(a) => a.out_dir.as_deref().unwrap_or(Path::new(".")).join(RUN_MANIFEST),
    }
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::Despeckle(_) => "despeckle",
        Command::Train(_) => "train",
        Command::Estimate(_) => "estimate",
        Command::Metric(_) => "metric",
        Command::Delineate(_) => "delineate",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Selftest(_) => "selftest",
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let path = cli.manifest.clone().unwrap_or_else(|| manifest_path(&cli.command));
    let threads = resolve_threads(cli.threads);
    let mut manifest = RunManifest::new(subcommand_name(&cli.command), *threads.as_ref().unwrap_or(&1));
    let result = threads.and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
        let file = FileConfig::load(cli.config.as_deref())?;
        if let Some(c) = &cli.config {
            manifest.input(c);
        }
        pool.install(|| dispatch(&cli.command, &file, &mut manifest))
    });
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    manifest.status = if code == 0 { "ok".into() } else { "error".into() };
    manifest.error = result.err().map(|e| e.to_string());
    manifest.exit_code = code;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    if let Err(e) = write_manifest(&path, &manifest) {
        eprintln!("error: could not write run manifest {}: {e}", path.display());
        return if code == 0 { e.exit_code() } else { code };
    }
    code
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

fn dispatch(cmd: &Command, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a, file, m),
        Command::Despeckle(a) => cmd_despeckle(a, file, m),
        Command::Train(a) => cmd_train(a, file, m),
        Command::Estimate(a) => cmd_estimate(a, file, m),
        Command::Metric(a) => cmd_metric(a, file, m),
        Command::Delineate(a) => cmd_delineate(a, file, m),
        Command::Eval(a) => cmd_eval(a, file, m),
        Command::Ablate(a) => cmd_ablate(a, file, m),
        Command::Selftest(a) => cmd_selftest(a, m),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn resolve_preprocess(base: PreprocessConfig, a: &PreprocessArgs) -> Result<PreprocessConfig> {
    let mut cfg = base;
    set(&mut cfg.tv_weight, a.tv_weight);
    set(&mut cfg.tv_iters, a.tv_iters);
    set(&mut cfg.clip_epsilon, a.clip_eps);
    cfg.validate()?;
    Ok(cfg)
}

fn value_check(a: &PreprocessArgs) -> ValueCheck {
    if a.allow_raw {
        ValueCheck::Finite
    } else {
        ValueCheck::OpenUnit
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// Reads frames of any count, validates values, clips, optionally
/// despeckles; linear power.
fn load_linear(path: &Path, a: &PreprocessArgs, cfg: &PreprocessConfig, despeckle: bool) -> Result<Array4<f32>> {
    let (_, data) = read_container(path)?;
    let check = value_check(a);
    if let Some(v) = data
        .iter()
        .find(|v| !v.is_finite() || (check == ValueCheck::OpenUnit && !(**v > 0.0 && **v < 1.0)))
    {
        bail!(Format, "{}: value {v} rejected; pass --allow-raw for unclipped data", path.display());
    }
    let clipped = clip_array(data.view(), cfg.clip_epsilon);
    if despeckle {
        despeckle_array(clipped.view(), cfg)
    } else {
        Ok(clipped)
    }
}

fn pick_frame(data: &Array4<f32>, frame: Option<usize>, path: &Path) -> Result<ndarray::Array3<f64>> {
    let t = data.dim().0;
    let k = frame.unwrap_or(t.saturating_sub(1));
    if k >= t {
        bail!(Bounds, "{}: frame {k} out of range for {t} frames", path.display());
    }
    Ok(data.index_axis(Axis(0), k).mapv(f64::from))
}

fn cmd_synth(a: &SynthArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    let mut cfg = file.synth.clone().unwrap_or_else(|| match a.corpus {
        Some(_) => SynthConfig::default(),
        None => SynthConfig::benchmark_scene(0),
    });
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.height, a.height);
    set(&mut cfg.width, a.width);
    set(&mut cfg.num_steps, a.num_steps);
    set(&mut cfg.looks, a.looks);
    set(&mut cfg.disturbance_fraction, a.disturbance_fraction);
    set(&mut cfg.disturbance_delta_db, a.disturbance_delta_db);
    set(&mut cfg.seasonal_amplitude_db, a.seasonal_amplitude_db);
    m.seed = Some(cfg.seed);
    match (a.corpus, &a.out_dir, &a.out, &a.mask) {
        (Some(count), Some(dir), _, _) => {
            m.config = json!({ "synth": cfg, "corpus": count, "tile": a.tile });
            cfg.validate()?;
            generate_training_corpus_tiles(&cfg, count, a.tile, dir)?;
            m.output(&dir.join(crate::synth::MANIFEST_FILE));
        }
        (None, _, Some(out), Some(mask)) => {
            m.config = json!({ "synth": cfg });
            let (stack, truth) = generate(&cfg)?;
            ensure_parent(out)?;
            ensure_parent(mask)?;
            write_rts(&stack, out)?;
            write_mask(mask, &truth)?;
            m.output(out);
            m.output(mask);
        }
        _ => bail!(Validation, "synth needs --out and --mask, or --corpus and --out-dir"),
    }
    Ok(())
}

fn cmd_despeckle(a: &DespeckleArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    m.input(&a.input);
    let cfg = resolve_preprocess(file.preprocess.clone().unwrap_or_default(), &a.pre)?;
    m.config = json!({ "preprocess": cfg, "allow_raw": a.pre.allow_raw });
    let stack = read_rts_checked(&a.input, value_check(&a.pre))?;
    let clipped = crate::preprocess::clip_open_interval(&stack, cfg.clip_epsilon)?;
    let out = despeckle_tv(&clipped, &cfg)?;
    ensure_parent(&a.out)?;
    write_rts(&out, &a.out)?;
    m.output(&a.out);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointPreprocess {
    preprocess: PreprocessConfig,
    despeckle: bool,
}

fn cmd_train(a: &TrainArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    m.input(&a.corpus);
    let mut model_cfg = file.model.clone().unwrap_or_else(|| match a.model {
        Some(KindArg::Gru) => ModelConfig::gru(),
        _ => ModelConfig::transformer(),
    });
    if let Some(k) = a.model {
        model_cfg.kind = match k {
            KindArg::Transformer => ModelKind::Transformer,
            KindArg::Gru => ModelKind::Gru,
        };
    }
    if let Some(ff) = a.ff_dim {
        model_cfg.ff_dim = ff;
        model_cfg.head_hidden = ff;
    }
    set(&mut model_cfg.num_layers, a.num_layers);
    set(&mut model_cfg.input_size, a.input_size);
    set(&mut model_cfg.patch_size, a.patch_size);
    set(&mut model_cfg.dropout, a.dropout);
    let mut cfg = file.train.clone().unwrap_or_default();
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.lr_initial, a.lr_initial);
    set(&mut cfg.lr_after_decay, a.lr_after_decay);
    set(&mut cfg.decay_epoch, a.decay_epoch);
    set(&mut cfg.adam_beta1, a.adam_beta1);
    set(&mut cfg.adam_beta2, a.adam_beta2);
    set(&mut cfg.adam_eps, a.adam_eps);
    set(&mut cfg.t_min, a.t_min);
    set(&mut cfg.t_max, a.t_max);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.chunk_size, a.chunk_size);
    let model_seed = a.model_seed.unwrap_or(cfg.seed);
    let pre = resolve_preprocess(file.preprocess.clone().unwrap_or_default(), &a.pre)?;
    let despeckle = a.despeckle.unwrap_or(true);
    m.seed = Some(cfg.seed);
    m.config = json!({
        "model": model_cfg, "model_seed": model_seed, "train": cfg,
        "preprocess": pre, "despeckle": despeckle, "allow_raw": a.pre.allow_raw,
    });
    model_cfg.validate()?;
    cfg.validate(&model_cfg)?;
    let corpus_manifest = CorpusManifest::read(&a.corpus)?;
    let stacks = corpus_manifest
        .resolve(&a.corpus)
        .iter()
        .map(|p| read_rts_checked(p, value_check(&a.pre)))
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus::from_stacks(&stacks, &pre, despeckle)?;
    let model = Model::new(model_cfg, model_seed)?;
    let outcome = train(model, &cfg, &corpus, |r| eprintln!("epoch {} mean_nll {:.6} lr {:e}", r.epoch, r.mean_nll, r.lr))?;
    outcome.model.save(&a.out)?;
    let pre_path = a.out.join(CHECKPOINT_PREPROCESS);
    fs::write(&pre_path, serde_json::to_string_pretty(&CheckpointPreprocess { preprocess: pre, despeckle })? + "\n")?;
    let curve_path = a.out.join("loss_curve.csv");
    write_loss_curve(&curve_path, &outcome.curve)?;
    for f in ["model.json", "weights.json", "weights.bin"] {
        m.output(&a.out.join(f));
    }
    m.output(&pre_path);
    m.output(&curve_path);
    if let Some((epoch, batch)) = outcome.diverged_at {
        bail!(Numeric, "training diverged at epoch {epoch}, batch {batch}; last finite weights saved");
    }
    Ok(())
}

fn load_checkpoint(dir: &Path, m: &mut RunManifest) -> Result<(Model, Option<CheckpointPreprocess>)> {
    m.input(dir);
    let model = Model::load(dir)?;
    let p = dir.join(CHECKPOINT_PREPROCESS);
    let pre = if p.exists() { Some(serde_json::from_slice(&crate::error::read_file(&p)?)?) } else { None };
    Ok((model, pre))
}

fn resolve_sweep(file: &FileConfig, stride: Option<usize>, batch: Option<usize>) -> SweepConfig {
    let mut cfg = file.sweep.unwrap_or_default();
    set(&mut cfg.stride, stride);
    set(&mut cfg.batch, batch);
    cfg
}

fn cmd_estimate(a: &EstimateArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    m.input(&a.input);
    let (model, stored) = load_checkpoint(&a.checkpoint, m)?;
    let base = file.preprocess.clone().or_else(|| stored.as_ref().map(|s| s.preprocess.clone())).unwrap_or_default();
    let pre = resolve_preprocess(base, &a.pre)?;
    let despeckle = a.despeckle.or(stored.as_ref().map(|s| s.despeckle)).unwrap_or(true);
    let sweep = resolve_sweep(file, a.stride, a.batch);
    m.config = json!({
        "model": model.config(), "preprocess": pre, "despeckle": despeckle, "sweep": sweep,
        "baseline_len": a.baseline_len, "allow_raw": a.pre.allow_raw,
    });
    let [mu_path, sigma_path] = a.out.as_slice() else { bail!(Validation, "--out takes a mean and a sigma path") };
    let linear = load_linear(&a.input, &a.pre, &pre, despeckle)?;
    let t = linear.dim().0;
    let n = a.baseline_len.unwrap_or(t);
    if n == 0 || n > t {
        bail!(Bounds, "baseline length {n} outside 1..={t}");
    }
    let logits = logit_array(linear.slice(s![..n, .., .., ..]).mapv(f64::from))?;
    let est = sweep_estimate(&model, logits.view(), &sweep)?;
    ensure_parent(mu_path)?;
    ensure_parent(sigma_path)?;
    write_estimate(mu_path, sigma_path, &est)?;
    m.output(mu_path);
    m.output(sigma_path);
    Ok(())
}

fn cmd_metric(a: &MetricArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    let pre_cfg = resolve_preprocess(file.preprocess.clone().unwrap_or_default(), &a.preprocess)?;
    let metric = match a.kind {
        MetricKind::Mahalanobis => {
            let (mu, sigma) = (a.mu.as_ref().unwrap(), a.sigma.as_ref().unwrap());
            let despeckle = a.despeckle.unwrap_or(true);
            m.config = json!({
                "kind": "mahalanobis", "preprocess": pre_cfg, "despeckle": despeckle,
                "frame": a.frame, "allow_raw": a.preprocess.allow_raw,
            });
            for p in [mu, sigma, &a.post] {
                m.input(p);
            }
            let est = read_estimate(mu, sigma)?;
            let post = load_linear(&a.post, &a.preprocess, &pre_cfg, despeckle)?;
            let x = logit_array(pick_frame(&post, a.frame, &a.post)?.insert_axis(Axis(0)).into_owned())?;
            mahalanobis_metric(&est, x.index_axis(Axis(0), 0))?
        }
        MetricKind::Logratio => {
            let pre_path = a.pre.as_ref().unwrap();
            let despeckle = a.despeckle.unwrap_or(false);
            m.config = json!({
                "kind": "logratio", "preprocess": pre_cfg, "despeckle": despeckle,
                "frame": a.frame, "allow_raw": a.preprocess.allow_raw,
            });
            m.input(pre_path);
            m.input(&a.post);
            let reference = load_linear(pre_path, &a.preprocess, &pre_cfg, despeckle)?.mapv(f64::from);
            let post = load_linear(&a.post, &a.preprocess, &pre_cfg, despeckle)?;
            log_ratio_from_frames(reference.view(), pick_frame(&post, a.frame, &a.post)?.view())?
        }
    };
    ensure_parent(&a.out)?;
    write_metric(&a.out, &metric)?;
    m.output(&a.out);
    Ok(())
}

fn cmd_delineate(a: &DelineateArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    m.input(&a.metric);
    let mut cfg = file.metric.unwrap_or_default();
    set(&mut cfg.tau, a.tau);
    m.config = json!({ "metric": cfg });
    cfg.validate()?;
    let map = read_metric(&a.metric)?;
    let out = threshold_delineate(&map, cfg.tau)?;
    ensure_parent(&a.out)?;
    write_mask(&a.out, &out.mask)?;
    m.output(&a.out);
    Ok(())
}

fn method_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Transformer => "transformer",
        ModelKind::Gru => "gru",
    }
}

fn cmd_eval(a: &EvalArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    m.input(&a.input);
    m.input(&a.truth);
    let (model, stored) = load_checkpoint(&a.checkpoint, m)?;
    let base = file.preprocess.clone().or_else(|| stored.as_ref().map(|s| s.preprocess.clone())).unwrap_or_default();
    let pre = resolve_preprocess(base, &a.pre)?;
    let despeckle = a.despeckle.or(stored.as_ref().map(|s| s.despeckle)).unwrap_or(true);
    let sweep = resolve_sweep(file, a.stride, a.batch);
    m.config = json!({
        "model": model.config(), "preprocess": pre, "despeckle": despeckle,
        "log_ratio_despeckle": a.log_ratio_despeckle, "sweep": sweep, "max_points": a.max_points,
        "allow_raw": a.pre.allow_raw,
    });
    let stack = read_rts_checked(&a.input, value_check(&a.pre))?;
    let truth = read_mask(&a.truth)?;
    let forecaster = evaluate_forecaster(&model, &stack, &truth, &pre, despeckle, &sweep, a.max_points)?;
    let log_ratio = evaluate_log_ratio(&stack, &truth, &pre, a.log_ratio_despeckle, a.max_points)?;
    let name = method_name(model.config().kind);
    emit_report(&forecaster.report, &forecaster.set, name, &a.out_dir)?;
    let lr_dir = a.out_dir.join("log_ratio");
    emit_report(&log_ratio.report, &log_ratio.set, "log-ratio", &lr_dir)?;
    emit_comparison(
        &[(name, &forecaster.report, &forecaster.set), ("log-ratio", &log_ratio.report, &log_ratio.set)],
        &a.out_dir,
    )?;
    write_metric(&a.out_dir.join("metric_post.rts"), &forecaster.metrics.post)?;
    write_metric(&lr_dir.join("metric_post.rts"), &log_ratio.metrics.post)?;
    let summary = json!({
        name: summary_entry(&forecaster.report),
        "log_ratio": summary_entry(&log_ratio.report),
    });
    let summary_path = a.out_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    for f in ["pr_curve.csv", "f1_vs_tau.csv", "pr_curve.svg", "f1_vs_tau.svg", "compare_pr.svg", "compare_f1.svg", "metric_post.rts"] {
        m.output(&a.out_dir.join(f));
    }
    for f in ["pr_curve.csv", "f1_vs_tau.csv", "pr_curve.svg", "f1_vs_tau.svg", "metric_post.rts"] {
        m.output(&lr_dir.join(f));
    }
    m.output(&summary_path);
    println!("{name} pr_auc {:.4} best_f1 {:.4}", forecaster.report.pr_auc, forecaster.report.best_f1);
    println!("log_ratio pr_auc {:.4} best_f1 {:.4}", log_ratio.report.pr_auc, log_ratio.report.best_f1);
    Ok(())
}

fn summary_entry(r: &crate::evaluation::EvalReport) -> Value {
    json!({
        "pr_auc": r.pr_auc, "best_f1": r.best_f1, "best_tau": r.best_tau,
        "positives": r.positives, "negatives": r.negatives,
    })
}

fn cmd_ablate(a: &AblateArgs, file: &FileConfig, m: &mut RunManifest) -> Result<()> {
    let grid = match a.grid {
        GridArg::InputPatch => AblationGrid::InputPatch,
        GridArg::ModelSize => AblationGrid::ModelSize,
        GridArg::LearningRate => AblationGrid::LearningRate,
    };
    let mut base = file.benchmark.clone().unwrap_or_default();
    set(&mut base.corpus_size, a.corpus_size);
    set(&mut base.train.epochs, a.epochs);
    set(&mut base.train.batch_size, a.batch_size);
    if let Some(side) = a.scene_size {
        base.scene.height = side;
        base.scene.width = side;
    }
    m.seed = Some(base.corpus_seed);
    m.config = json!({ "grid": grid, "benchmark": base });
    fs::create_dir_all(&a.out_dir)?;
    println!("| preset | parameters | final NLL | PR-AUC | best F1 |");
    println!("|---|---|---|---|---|");
    let rows = run_ablation(grid, &base, |r| {
        println!("| {} | {} | {:.4} | {:.4} | {:.4} |", r.label, r.parameters, r.final_nll, r.pr_auc, r.best_f1);
    })?;
    let path = a.out_dir.join(format!("ablation_{}.csv", grid.as_str()));
    fs::write(&path, ablation_csv(&rows))?;
    m.output(&path);
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs, m: &mut RunManifest) -> Result<()> {
    m.config = json!({ "full": a.full });
    let checks = run_selftest(a.full);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("selftest.json");
        fs::write(&path, serde_json::to_string_pretty(&checks)? + "\n")?;
        m.output(&path);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!(Validation, "selftest failed: {}", failed.join(", "));
    }
    Ok(())
}
