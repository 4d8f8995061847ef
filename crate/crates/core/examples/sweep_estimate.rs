//! Sliding-window forecast over a full scene, with the per-pixel window
//! coverage for the chosen stride.
//!
//! `cargo run --release --example sweep_estimate [checkpoint_dir]`

use ndarray::s;
use sardist::inference::{coverage_counts, sweep_estimate, SweepConfig};
use sardist::model::{Model, ModelConfig};
use sardist::preprocess::{prepare_logit, PreprocessConfig};
use sardist::synth::{generate, SynthConfig};

fn main() -> sardist::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(dir) => Model::load(dir.as_ref())?,
        None => Model::new(ModelConfig { ff_dim: 128, head_hidden: 128, num_layers: 1, ..ModelConfig::transformer() }, 1)?,
    };
    let (stack, _) = generate(&SynthConfig { height: 48, width: 40, seed: 9, ..SynthConfig::default() })?;
    let logits = prepare_logit(&stack, &PreprocessConfig::default(), true)?;
    let t = logits.dim().0;
    let sweep = SweepConfig { stride: 8, batch: 16 };
    let est = sweep_estimate(&model, logits.slice(s![..t - 1, .., .., ..]), &sweep)?;
    let counts = coverage_counts(48, 40, model.config().input_size, sweep.stride)?;
    println!("windows per pixel: min {} max {}", counts.iter().min().unwrap(), counts.iter().max().unwrap());
    let mean = |a: &ndarray::Array3<f64>| a.mean().unwrap();
    println!("forecast mean logit {:.3}, mean sigma {:.3}", mean(&est.mu), mean(&est.sigma));
    Ok(())
}
