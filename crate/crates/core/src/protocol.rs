//! The two-image evaluation protocol and the seeded synthetic benchmark.
//!
//! For a stack of `T` frames whose last frame is post-event, frames
//! `0..T-2` form the baseline, frame `T-2` is a held-out pre-event image
//! scored as all-negative, and frame `T-1` is scored against the truth mask.

use ndarray::{s, Array2, Array3, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::disturbance::{log_ratio_from_frames, mahalanobis_metric};
use crate::error::{bail, Result};
use crate::evaluation::{build_labeled_set, pr_curve, EvalReport, LabeledMetricSet};
use crate::inference::{sweep_estimate, Forecaster, SweepConfig};
use crate::model::{Model, ModelConfig};
use crate::preprocess::{clip_open_interval, despeckle_tv, logit_transform, PreprocessConfig};
use crate::raster::{DisturbanceMap, DistributionEstimate, RasterStack};
use crate::synth::{generate, generate_corpus_tiles, SynthConfig};
use crate::training::{train, Corpus, EpochRecord, TrainConfig};

/// Clipped and optionally despeckled backscatter, in linear power.
pub fn preprocess_linear(stack: &RasterStack, cfg: &PreprocessConfig, despeckle: bool) -> Result<Array4<f64>> {
    let clipped = clip_open_interval(stack, cfg.clip_epsilon)?;
    let ready = if despeckle { despeckle_tv(&clipped, cfg)? } else { clipped };
    Ok(ready.data().mapv(f64::from))
}

fn check_frames(t: usize) -> Result<()> {
    if t < 4 {
        bail!(Contract, "two-image protocol needs at least 4 frames (2 baseline, pre, post), got {t}");
    }
    Ok(())
}

/// Metric maps for the held-out pre-event frame and the post-event frame.
#[derive(Debug, Clone)]
pub struct PairedMetrics {
    pub pre: DisturbanceMap,
    pub post: DisturbanceMap,
}

impl PairedMetrics {
    pub fn labeled(&self, truth: &Array2<bool>) -> Result<LabeledMetricSet> {
        build_labeled_set(&self.pre, &self.post, truth)
    }
}

/// Sweeps the baseline once and scores both held-out frames against it.
/// `logits` is the full `(T, C, H, W)` stack in logit space.
pub fn forecaster_metrics<F: Forecaster + ?Sized>(
    model: &F,
    logits: ArrayView4<f64>,
    sweep: &SweepConfig,
) -> Result<(DistributionEstimate, PairedMetrics)> {
    let t = logits.dim().0;
    check_frames(t)?;
    let est = sweep_estimate(model, logits.slice(s![..t - 2, .., .., ..]), sweep)?;
    let pre = mahalanobis_metric(&est, logits.index_axis(Axis(0), t - 2))?;
    let post = mahalanobis_metric(&est, logits.index_axis(Axis(0), t - 1))?;
    Ok((est, PairedMetrics { pre, post }))
}

/// Log-ratio against the lower temporal median of the same baseline frames.
/// `linear` is the full `(T, C, H, W)` stack in linear power.
pub fn log_ratio_metrics(linear: ArrayView4<f64>) -> Result<PairedMetrics> {
    let t = linear.dim().0;
    check_frames(t)?;
    let baseline = linear.slice(s![..t - 2, .., .., ..]);
    Ok(PairedMetrics {
        pre: log_ratio_from_frames(baseline, linear.index_axis(Axis(0), t - 2))?,
        post: log_ratio_from_frames(baseline, linear.index_axis(Axis(0), t - 1))?,
    })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub metrics: PairedMetrics,
    pub set: LabeledMetricSet,
    pub report: EvalReport,
}

impl MethodResult {
    fn new(metrics: PairedMetrics, truth: &Array2<bool>, max_points: usize) -> Result<Self> {
        let set = metrics.labeled(truth)?;
        let report = pr_curve(&set, max_points)?;
        Ok(Self { metrics, set, report })
    }
}

pub fn evaluate_forecaster<F: Forecaster + ?Sized>(
    model: &F,
    stack: &RasterStack,
    truth: &Array2<bool>,
    pre: &PreprocessConfig,
    despeckle: bool,
    sweep: &SweepConfig,
    max_points: usize,
) -> Result<MethodResult> {
    let logits = logit_transform(&stack.with_data(
        preprocess_linear(stack, pre, despeckle)?.mapv(|v| v as f32),
        crate::raster::ValueCheck::OpenUnit,
    )?)?;
    let (_, metrics) = forecaster_metrics(model, logits.view(), sweep)?;
    MethodResult::new(metrics, truth, max_points)
}

pub fn evaluate_log_ratio(
    stack: &RasterStack,
    truth: &Array2<bool>,
    pre: &PreprocessConfig,
    despeckle: bool,
    max_points: usize,
) -> Result<MethodResult> {
    let linear = preprocess_linear(stack, pre, despeckle)?;
    MethodResult::new(log_ratio_metrics(linear.view())?, truth, max_points)
}

/// Everything that determines a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub corpus_seed: u64,
    pub corpus_size: usize,
    pub scene_seed: u64,
    /// Scene generator settings; `seed` is replaced by `scene_seed`.
    pub scene: SynthConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Despeckle before the forecaster's logit transform.
    pub despeckle: bool,
    /// Despeckle the log-ratio inputs too. The classical detector works on
    /// clipped backscatter with the temporal median as its only smoothing.
    pub log_ratio_despeckle: bool,
    pub sweep: SweepConfig,
    pub max_points: usize,
}

impl Default for BenchmarkConfig {
    /// The desk-scale run: FF=512, L=2 transformer without dropout, 5 epochs
    /// of single-sequence Adam steps over 512 sequences, evaluated with a
    /// stride-1 sweep on a 128x128 scene with a -6 dB disturbance.
    fn default() -> Self {
        Self {
            corpus_seed: 1,
            corpus_size: 512,
            scene_seed: 2,
            scene: SynthConfig::benchmark_scene(2),
            model: ModelConfig { dropout: 0.0, ..ModelConfig::transformer_sized(512, 2) },
            model_seed: 3,
            train: TrainConfig {
                batch_size: 1,
                epochs: 5,
                lr_initial: 5e-4,
                lr_after_decay: 5e-5,
                decay_epoch: 3,
                seed: 4,
                ..TrainConfig::default()
            },
            preprocess: PreprocessConfig::default(),
            despeckle: true,
            log_ratio_despeckle: false,
            sweep: SweepConfig { stride: 1, ..SweepConfig::default() },
            max_points: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub model: Model,
    pub curve: Vec<EpochRecord>,
    pub diverged_at: Option<(usize, usize)>,
    pub truth: Array2<bool>,
    pub forecaster: MethodResult,
    pub log_ratio: MethodResult,
}

/// Training corpus for a benchmark configuration, tiled at the model's
/// input size.
pub fn benchmark_corpus(cfg: &BenchmarkConfig) -> Result<Corpus> {
    let corpus_cfg = SynthConfig { seed: cfg.corpus_seed, ..cfg.scene.clone() };
    let stacks = generate_corpus_tiles(&corpus_cfg, cfg.corpus_size, cfg.model.input_size)?;
    Corpus::from_stacks(&stacks, &cfg.preprocess, cfg.despeckle)
}

pub fn benchmark_scene(cfg: &BenchmarkConfig) -> Result<(RasterStack, Array2<bool>)> {
    generate(&SynthConfig { seed: cfg.scene_seed, ..cfg.scene.clone() })
}

/// Generates data, trains, and evaluates both methods on the same scene.
pub fn run_benchmark(cfg: &BenchmarkConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<BenchmarkOutcome> {
    let corpus = benchmark_corpus(cfg)?;
    let model = Model::new(cfg.model.clone(), cfg.model_seed)?;
    let trained = train(model, &cfg.train, &corpus, on_epoch)?;
    let (stack, truth) = benchmark_scene(cfg)?;
    let forecaster = evaluate_forecaster(
        &trained.model,
        &stack,
        &truth,
        &cfg.preprocess,
        cfg.despeckle,
        &cfg.sweep,
        cfg.max_points,
    )?;
    let log_ratio = evaluate_log_ratio(&stack, &truth, &cfg.preprocess, cfg.log_ratio_despeckle, cfg.max_points)?;
    Ok(BenchmarkOutcome {
        model: trained.model,
        curve: trained.curve,
        diverged_at: trained.diverged_at,
        truth,
        forecaster,
        log_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    InputPatch,
    ModelSize,
    LearningRate,
}

/// `(input size, patch size)`.
pub const INPUT_PATCH_PRESETS: [(usize, usize); 3] = [(16, 8), (32, 8), (32, 16)];
/// `(feed-forward width, layers)`.
pub const MODEL_SIZE_PRESETS: [(usize, usize); 3] = [(512, 2), (768, 4), (1024, 8)];
pub const LEARNING_RATE_PRESETS: [f64; 3] = [1e-4, 1e-5, 1e-6];

impl AblationGrid {
    pub const ALL: [AblationGrid; 3] = [AblationGrid::InputPatch, AblationGrid::ModelSize, AblationGrid::LearningRate];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationGrid::InputPatch => "input_patch",
            AblationGrid::ModelSize => "model_size",
            AblationGrid::LearningRate => "learning_rate",
        }
    }

    /// One labelled benchmark configuration per preset, derived from `base`.
    /// Learning-rate presets decay tenfold at the base decay epoch.
    pub fn presets(self, base: &BenchmarkConfig) -> Vec<(String, BenchmarkConfig)> {
        match self {
            AblationGrid::InputPatch => INPUT_PATCH_PRESETS
                .iter()
                .map(|&(input_size, patch_size)| {
                    let model = ModelConfig { input_size, patch_size, ..base.model.clone() };
                    (format!("I={input_size} P={patch_size}"), BenchmarkConfig { model, ..base.clone() })
                })
                .collect(),
            AblationGrid::ModelSize => MODEL_SIZE_PRESETS
                .iter()
                .map(|&(ff_dim, num_layers)| {
                    let model = ModelConfig { ff_dim, head_hidden: ff_dim, num_layers, ..base.model.clone() };
                    (format!("FF={ff_dim} L={num_layers}"), BenchmarkConfig { model, ..base.clone() })
                })
                .collect(),
            AblationGrid::LearningRate => LEARNING_RATE_PRESETS
                .iter()
                .map(|&lr| {
                    let train = TrainConfig { lr_initial: lr, lr_after_decay: lr / 10.0, ..base.train.clone() };
                    (format!("lr={lr:e}"), BenchmarkConfig { train, ..base.clone() })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: AblationGrid,
    pub label: String,
    pub input_size: usize,
    pub patch_size: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub lr_initial: f64,
    pub parameters: usize,
    pub final_nll: f64,
    pub pr_auc: f64,
    pub best_f1: f64,
}

/// Trains and evaluates every preset of `grid` in order.
pub fn run_ablation(
    grid: AblationGrid,
    base: &BenchmarkConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in grid.presets(base) {
        let out = run_benchmark(&cfg, |_| {})?;
        let row = AblationRow {
            grid,
            label,
            input_size: cfg.model.input_size,
            patch_size: cfg.model.patch_size,
            ff_dim: cfg.model.ff_dim,
            num_layers: cfg.model.num_layers,
            lr_initial: cfg.train.lr_initial,
            parameters: out.model.num_parameters(),
            final_nll: out.curve.last().map_or(f64::NAN, |r| r.mean_nll),
            pr_auc: out.forecaster.report.pr_auc,
            best_f1: out.forecaster.report.best_f1,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("grid,label,input_size,patch_size,ff_dim,num_layers,lr_initial,parameters,final_nll,pr_auc,best_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:e},{},{},{},{}\n",
            r.grid.as_str(),
            r.label,
            r.input_size,
            r.patch_size,
            r.ff_dim,
            r.num_layers,
            r.lr_initial,
            r.parameters,
            r.final_nll,
            r.pr_auc,
            r.best_f1
        ));
    }
    out
}

/// Mean metric inside and outside `mask`.
pub fn masked_means(values: &Array2<f64>, mask: &Array2<bool>) -> (f64, f64) {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask.iter()) {
        if m {
            a += v;
            na += 1;
        } else {
            b += v;
            nb += 1;
        }
    }
    (a / na.max(1) as f64, b / nb.max(1) as f64)
}

/// Per-pixel mean over the estimate's channels, for quick summaries.
pub fn channel_mean(a: &Array3<f64>) -> Array2<f64> {
    a.mean_axis(Axis(0)).expect("at least one channel")
}
