//! Full-scene estimation by sweeping a fixed-size forecaster across a raster
//! and averaging overlapping estimates.

use ndarray::{s, Array2, Array3, ArrayView3, ArrayView4};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disturbance::mahalanobis_metric;
use crate::error::{bail, Result};
use crate::model::{Mode, Model};
use crate::raster::{DisturbanceMap, DistributionEstimate};

/// Anything that maps a `(T, C, S, S)` window to a `(C, S, S)` estimate.
pub trait Forecaster: Sync {
    fn window_size(&self) -> usize;

    fn forecast_batch(&self, windows: &[ArrayView4<f64>]) -> Result<Vec<DistributionEstimate>>;
}

impl Forecaster for Model {
    fn window_size(&self) -> usize {
        self.config().input_size
    }

    fn forecast_batch(&self, windows: &[ArrayView4<f64>]) -> Result<Vec<DistributionEstimate>> {
        self.forward_batch::<ChaCha8Rng>(windows, Mode::Eval, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub stride: usize,
    /// Windows per forward pass. Does not affect results.
    pub batch: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { stride: 4, batch: 16 }
    }
}

impl SweepConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        if self.stride == 0 || self.stride > window {
            bail!(Validation, "stride must be in [1, {window}], got {}", self.stride);
        }
        if self.batch == 0 {
            bail!(Validation, "batch must be positive");
        }
        Ok(())
    }
}

/// `0, stride, 2 stride, ...` with a final origin clamped to `len - window`.
pub fn window_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = len - window;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().unwrap() != last {
        origins.push(last);
    }
    origins
}

/// Number of sweep windows covering each pixel.
pub fn coverage_counts(height: usize, width: usize, window: usize, stride: usize) -> Result<Array2<u32>> {
    if height < window || width < window {
        bail!(Contract, "image {height}x{width} is smaller than the {window}px window");
    }
    let mut counts = Array2::<u32>::zeros((height, width));
    for &r in &window_origins(height, window, stride) {
        for &c in &window_origins(width, window, stride) {
            counts.slice_mut(s![r..r + window, c..c + window]).mapv_inplace(|n| n + 1);
        }
    }
    Ok(counts)
}

/// Estimates the frame after `frames` (`(T, C, H, W)`, logit space) at every
/// pixel by averaging `mu` and `sigma` over all covering windows.
pub fn sweep_estimate<F: Forecaster + ?Sized>(
    model: &F,
    frames: ArrayView4<f64>,
    cfg: &SweepConfig,
) -> Result<DistributionEstimate> {
    let window = model.window_size();
    cfg.validate(window)?;
    let (_, c, h, w) = frames.dim();
    if h < window || w < window {
        bail!(Contract, "image {h}x{w} is smaller than the {window}px window");
    }
    let origins: Vec<(usize, usize)> = window_origins(h, window, cfg.stride)
        .into_iter()
        .flat_map(|r| window_origins(w, window, cfg.stride).into_iter().map(move |c| (r, c)))
        .collect();
    let mut mu_sum = Array3::<f64>::zeros((c, h, w));
    let mut sigma_sum = Array3::<f64>::zeros((c, h, w));
    let mut counts = Array2::<f64>::zeros((h, w));
    // bounded groups keep memory flat on large scenes
    let group = cfg.batch * rayon::current_num_threads().max(1) * 4;
    for block in origins.chunks(group) {
        let estimates = block
            .par_chunks(cfg.batch)
            .map(|batch| {
                let views: Vec<ArrayView4<f64>> = batch
                    .iter()
                    .map(|&(r, c)| frames.slice(s![.., .., r..r + window, c..c + window]))
                    .collect();
                model.forecast_batch(&views)
            })
            .collect::<Result<Vec<_>>>()?;
        for (&(r, col), est) in block.iter().zip(estimates.into_iter().flatten()) {
            if est.mu.dim() != (c, window, window) {
                bail!(Shape, "forecaster returned {:?}, expected {:?}", est.mu.dim(), (c, window, window));
            }
            let region = s![.., r..r + window, col..col + window];
            let mut m = mu_sum.slice_mut(region);
            m += &est.mu;
            let mut sg = sigma_sum.slice_mut(region);
            sg += &est.sigma;
            counts.slice_mut(s![r..r + window, col..col + window]).mapv_inplace(|n| n + 1.0);
        }
    }
    let counts = counts.broadcast((c, h, w)).unwrap().to_owned();
    DistributionEstimate::new(mu_sum / &counts, sigma_sum / &counts)
}

/// Sweeps frames `0..T-1` and scores frame `T-1` against the estimate.
pub fn estimate_then_metric<F: Forecaster + ?Sized>(
    model: &F,
    frames: ArrayView4<f64>,
    cfg: &SweepConfig,
) -> Result<(DistributionEstimate, DisturbanceMap)> {
    let t = frames.dim().0;
    if t < 2 {
        bail!(Contract, "need baseline frames plus a final frame, got {t}");
    }
    let est = sweep_estimate(model, frames.slice(s![..t - 1, .., .., ..]), cfg)?;
    let metric = mahalanobis_metric(&est, frames.index_axis(ndarray::Axis(0), t - 1))?;
    Ok((est, metric))
}

/// Metric of `post` against an estimate from `baseline`.
pub fn metric_against(
    model: &(impl Forecaster + ?Sized),
    baseline: ArrayView4<f64>,
    post: ArrayView3<f64>,
    cfg: &SweepConfig,
) -> Result<DisturbanceMap> {
    let est = sweep_estimate(model, baseline, cfg)?;
    mahalanobis_metric(&est, post)
}
