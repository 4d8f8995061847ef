//! Standard-deviation metric from a forecast, the log-ratio metric, and a
//! thresholded mask, on a synthetic scene with a known disturbance.
//!
//! `cargo run --release --example disturbance_metrics`

use ndarray::{s, Array3, Axis};
use sardist::disturbance::{log_ratio_from_frames, mahalanobis_metric, temporal_median, threshold_delineate};
use sardist::protocol::{masked_means, preprocess_linear};
use sardist::preprocess::{logit_array, PreprocessConfig};
use sardist::raster::DistributionEstimate;
use sardist::synth::{generate, SynthConfig};

fn main() -> sardist::Result<()> {
    let (stack, truth) = generate(&SynthConfig { height: 64, width: 64, seed: 4, disturbance_fraction: 0.1, ..SynthConfig::default() })?;
    let cfg = PreprocessConfig::default();
    let t = stack.num_steps();

    // a naive forecaster: baseline mean and spread of the despeckled logits
    let logits = logit_array(preprocess_linear(&stack, &cfg, true)?)?;
    let baseline = logits.slice(s![..t - 1, .., .., ..]);
    let mu = baseline.mean_axis(Axis(0)).unwrap();
    let sigma: Array3<f64> = baseline.std_axis(Axis(0), 1.0).mapv(|v| v.max(1e-3));
    let est = DistributionEstimate::new(mu, sigma)?;
    let d = mahalanobis_metric(&est, logits.index_axis(Axis(0), t - 1))?;
    let (inside, outside) = masked_means(d.values(), &truth);
    println!("SD metric: mean {inside:.2} inside the disturbance, {outside:.2} outside");

    let linear = preprocess_linear(&stack, &cfg, false)?;
    let lr = log_ratio_from_frames(linear.slice(s![..t - 1, .., .., ..]), linear.index_axis(Axis(0), t - 1))?;
    let (inside, outside) = masked_means(lr.values(), &truth);
    println!("log-ratio: mean {inside:.3} inside, {outside:.3} outside");
    println!("reference median shape {:?}", temporal_median(linear.slice(s![..t - 1, .., .., ..])).dim());

    let mask = threshold_delineate(&d, 3.0)?.mask;
    let hits = mask.iter().zip(truth.iter()).filter(|(&m, &t)| m && t).count();
    println!("tau 3: {} flagged, {} of {} disturbed pixels", mask.iter().filter(|&&m| m).count(), hits, truth.iter().filter(|&&m| m).count());
    Ok(())
}
