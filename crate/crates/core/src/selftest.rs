//! Runtime invariant checks behind the `selftest` subcommand.

use ndarray::{Array2, Array3, Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::disturbance::{log_ratio_from_frames, mahalanobis_metric, lower_median};
use crate::error::Result;
use crate::evaluation::{pr_curve, LabeledMetricSet};
use crate::inference::{sweep_estimate, Forecaster, SweepConfig};
use crate::model::{parameter_count, Model, ModelConfig};
use crate::raster::DistributionEstimate;
use crate::synth::{generate, SynthConfig};
use crate::training::{gradient_check, nll_loss, probe_inputs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, e.to_string()),
        }
    }
}

/// `full` runs the gradient gate on the default-size transformer instead of
/// a reduced one.
pub fn run_selftest(full: bool) -> Vec<Check> {
    vec![
        Check::from_result("parameter_counts", parameter_counts()),
        Check::from_result("token_count", token_count()),
        Check::from_result("gradient_gate", gradient_gate(full)),
        Check::from_result("nll_reference", nll_reference()),
        Check::from_result("metric_oracles", metric_oracles(200)),
        Check::from_result("sweep_exactness", sweep_exactness()),
        Check::from_result("pr_auc_oracle", pr_oracle()),
        Check::from_result("tail_probability", tail_probability(200_000)),
        Check::from_result("synth_determinism", synth_determinism()),
    ]
}

fn within(n: usize, target: f64, tol: f64) -> bool {
    (n as f64 / target - 1.0).abs() < tol
}

fn parameter_counts() -> Result<(bool, String)> {
    let t = Model::new(ModelConfig::transformer(), 0)?.num_parameters();
    let g = parameter_count(&ModelConfig::gru());
    let small = parameter_count(&ModelConfig::transformer_sized(512, 2));
    let large = parameter_count(&ModelConfig::transformer_sized(1024, 8));
    let ok = within(t, 3.3e6, 0.05) && within(g, 3.3e6, 0.05) && within(small, 1.5e6, 0.1) && within(large, 7.1e6, 0.1);
    Ok((ok, format!("transformer {t}, gru {g}, small {small}, large {large}")))
}

fn token_count() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::transformer(), 0)?;
    let tokens = model.patchify(Array4::<f64>::zeros((10, 2, 16, 16)).view())?.tokens.nrows();
    Ok((tokens == 40, format!("{tokens} tokens for T=10, 16x16, P=8")))
}

fn gradient_gate(full: bool) -> Result<(bool, String)> {
    let cfg = if full {
        ModelConfig { dropout: 0.0, ..ModelConfig::transformer() }
    } else {
        ModelConfig { d_model: 32, num_heads: 4, num_layers: 2, ff_dim: 48, head_hidden: 40, dropout: 0.0, ..ModelConfig::transformer() }
    };
    let model = Model::new(cfg, 11)?;
    let (window, target) = probe_inputs(&model, 4, 12)?;
    let worst = gradient_check(&model, window.view(), target.view(), 50, 13)?;
    Ok((worst < 1e-4, format!("max relative error {worst:.3e} over 50 probes")))
}

fn nll_reference() -> Result<(bool, String)> {
    let x = Array3::from_elem((2, 4, 4), 0.3);
    let est = DistributionEstimate::new(x.clone(), Array3::from_elem((2, 4, 4), 1.0))?;
    let v = nll_loss(&est, x.view())?;
    Ok(((v - 0.918939).abs() < 1e-6, format!("{v:.9}")))
}

fn metric_oracles(trials: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mu = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(-5.0..5.0));
        let sigma = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(0.01..3.0));
        let post = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(-5.0..5.0));
        let pre = Array4::from_shape_simple_fn((5, 2, 8, 8), || rng.random_range(1e-3..1.0));
        let x = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(1e-3..1.0));
        let d = mahalanobis_metric(&DistributionEstimate::new(mu.clone(), sigma.clone())?, post.view())?;
        let lr = log_ratio_from_frames(pre.view(), x.view())?;
        for i in 0..8 {
            for j in 0..8 {
                let mut dm: f64 = 0.0;
                let mut dl: f64 = 0.0;
                for p in 0..2 {
                    dm = dm.max((post[[p, i, j]] - mu[[p, i, j]]).abs() / sigma[[p, i, j]]);
                    let mut series: Vec<f64> = (0..5).map(|t| pre[[t, p, i, j]]).collect();
                    dl = dl.max((x[[p, i, j]].log10() - lower_median(&mut series).log10()).abs());
                }
                worst = worst.max((d.values()[[i, j]] - dm).abs()).max((lr.values()[[i, j]] - dl).abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.1e} over {trials} trials")))
}

struct Constant;

impl Forecaster for Constant {
    fn window_size(&self) -> usize {
        16
    }

    fn forecast_batch(&self, windows: &[ArrayView4<f64>]) -> Result<Vec<DistributionEstimate>> {
        windows
            .iter()
            .map(|_| DistributionEstimate::new(Array3::from_elem((2, 16, 16), 1.0), Array3::from_elem((2, 16, 16), 1.0)))
            .collect()
    }
}

fn sweep_exactness() -> Result<(bool, String)> {
    let frames = Array4::<f64>::zeros((3, 2, 64, 64));
    let mut ok = true;
    for stride in [1, 4, 8, 16] {
        let est = sweep_estimate(&Constant, frames.view(), &SweepConfig { stride, batch: 7 })?;
        ok &= est.mu.iter().chain(est.sigma.iter()).all(|&v| v == 1.0);
    }
    Ok((ok, "constant stub on 64x64, strides 1/4/8/16".into()))
}

fn pr_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 400;
    let labels: Vec<bool> = (0..n).map(|i| i % 5 == 0).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| (rng.random_range(0..50) + if l { 10 } else { 0 }) as f64).collect();
    let report = pr_curve(&LabeledMetricSet::new(scores.clone(), labels.clone())?, 64)?;
    let mut taus = scores.clone();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut pts = Vec::new();
    for &tau in taus.iter().skip(1).chain([f64::NEG_INFINITY].iter()) {
        let tp = scores.iter().zip(&labels).filter(|(&s, &l)| s > tau && l).count() as f64;
        let pp = scores.iter().filter(|&&s| s > tau).count() as f64;
        pts.push((tp / positives, tp / pp));
    }
    let mut auc = pts[0].0 * pts[0].1;
    for w in pts.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    let diff = (auc - report.pr_auc).abs();
    Ok((diff < 1e-12, format!("AUC {:.6} vs brute force {auc:.6}", report.pr_auc)))
}

fn tail_probability(samples: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mu = Array3::<f64>::zeros((1, 1, samples));
    let post = Array3::from_shape_simple_fn((1, 1, samples), || normal.sample(&mut rng));
    let d = mahalanobis_metric(&DistributionEstimate::new(mu, Array3::from_elem((1, 1, samples), 1.0))?, post.view())?;
    let frac = d.values().iter().filter(|&&v| v > 3.0).count() as f64 / samples as f64;
    Ok((frac < 0.01, format!("P(d > 3) = {frac:.5}")))
}

fn synth_determinism() -> Result<(bool, String)> {
    let cfg = SynthConfig { height: 24, width: 24, seed: 51, ..SynthConfig::default() };
    let (a, ma): (_, Array2<bool>) = generate(&cfg)?;
    let (b, mb) = generate(&cfg)?;
    Ok((a == b && ma == mb, "same seed, same stack and mask".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for c in run_selftest(false) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
