//! TV despeckling of a synthetic stack: speckle variance before and after
//! inside one homogeneous region.
//!
//! `cargo run --release --example despeckle`

use sardist::preprocess::{clip_open_interval, despeckle_tv, PreprocessConfig};
use sardist::synth::{generate, SynthConfig};

fn db_variance(values: impl Iterator<Item = f32>) -> f64 {
    let db: Vec<f64> = values.map(|v| 10.0 * f64::from(v).log10()).collect();
    let mean = db.iter().sum::<f64>() / db.len() as f64;
    db.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / db.len() as f64
}

fn main() -> sardist::Result<()> {
    // one class everywhere, so all spatial variation is speckle
    let scene = SynthConfig { height: 64, width: 64, num_classes: 1, disturbance_fraction: 0.0, seed: 3, ..SynthConfig::default() };
    let (stack, _) = generate(&scene)?;
    let cfg = PreprocessConfig::default();
    let clean = despeckle_tv(&clip_open_interval(&stack, cfg.clip_epsilon)?, &cfg)?;
    for (name, s) in [("raw", &stack), ("despeckled", &clean)] {
        println!("{name:>10}: VV variance {:.3} dB^2", db_variance(s.data().slice(ndarray::s![0, 0, .., ..]).iter().copied()));
    }
    println!("tv_weight {} dB, {} iterations", cfg.tv_weight, cfg.tv_iters);
    Ok(())
}
