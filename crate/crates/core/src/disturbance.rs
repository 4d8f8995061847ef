//! Disturbance scores: per-polarization Mahalanobis distance combined by
//! maximum, the log-ratio change detector, and thresholding.

use ndarray::{Array2, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::{BinaryDelineation, DisturbanceMap, DistributionEstimate, MetricUnits, RasterStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub combine: Combine,
    pub tau: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { combine: Combine::Max, tau: 3.0 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bail!(Validation, "tau must be positive, got {}", self.tau);
        }
        Ok(())
    }
}

/// `d = max_p |x_p - mu_p| / sigma_p`
pub fn mahalanobis_metric(est: &DistributionEstimate, post: ArrayView3<f64>) -> Result<DisturbanceMap> {
    if est.mu.dim() != post.dim() {
        bail!(Shape, "estimate {:?} vs post image {:?}", est.mu.dim(), post.dim());
    }
    if let Some(s) = est.sigma.iter().find(|s| !(**s > 0.0)) {
        bail!(Domain, "sigma must be positive, got {s}");
    }
    let (_, h, w) = post.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for ((mu, sigma), x) in est.mu.outer_iter().zip(est.sigma.outer_iter()).zip(post.outer_iter()) {
        Zip::from(&mut out).and(&mu).and(&sigma).and(&x).for_each(|d, &m, &s, &x| {
            *d = d.max((x - m).abs() / s);
        });
    }
    DisturbanceMap::new(out, MetricUnits::StandardDeviations)
}

/// Lower median (element `(n - 1) / 2` of the sorted values).
pub fn lower_median(values: &mut [f64]) -> f64 {
    let k = (values.len() - 1) / 2;
    *values.select_nth_unstable_by(k, f64::total_cmp).1
}

/// Per-pixel, per-polarization lower median over time of a `(T, C, H, W)`
/// array.
pub fn temporal_median(frames: ArrayView4<f64>) -> ndarray::Array3<f64> {
    frames.map_axis(Axis(0), |series| lower_median(&mut series.to_vec()))
}

/// `max_p |log10(post_p) - log10(median_t pre_p)|` over explicit pre-event
/// frames in linear power.
pub fn log_ratio_from_frames(pre: ArrayView4<f64>, post: ArrayView3<f64>) -> Result<DisturbanceMap> {
    let (t, c, h, w) = pre.dim();
    if t < 2 {
        bail!(Contract, "log-ratio needs at least 2 reference frames, got {t}");
    }
    if (c, h, w) != post.dim() {
        bail!(Shape, "reference frames {:?} vs post image {:?}", (c, h, w), post.dim());
    }
    if let Some(v) = pre.iter().chain(post.iter()).find(|v| !(**v > 0.0 && v.is_finite())) {
        bail!(Domain, "log-ratio needs positive finite backscatter, got {v}");
    }
    let reference = temporal_median(pre);
    let mut out = Array2::<f64>::zeros((h, w));
    for (r, x) in reference.outer_iter().zip(post.outer_iter()) {
        Zip::from(&mut out).and(&r).and(&x).for_each(|d, &r, &x| {
            *d = d.max((x.log10() - r.log10()).abs());
        });
    }
    DisturbanceMap::new(out, MetricUnits::Decibels)
}

/// Log-ratio of `post` against the temporal median of every frame of `pre`.
pub fn log_ratio_metric(pre: &RasterStack, post: ArrayView3<f64>) -> Result<DisturbanceMap> {
    log_ratio_from_frames(pre.data().mapv(f64::from).view(), post)
}

/// `metric > tau`
pub fn threshold_delineate(metric: &DisturbanceMap, tau: f64) -> Result<BinaryDelineation> {
    if !(tau > 0.0) {
        bail!(Validation, "tau must be positive, got {tau}");
    }
    Ok(BinaryDelineation { mask: metric.values().mapv(|d| d > tau), tau, units: metric.units() })
}
