//! Finite-difference check of the hand-written backward pass on the
//! default-size transformer and GRU.
//!
//! `cargo run --release --example gradient_check [probes]`

use sardist::model::{Model, ModelConfig};
use sardist::training::{gradient_check, probe_inputs};

fn main() -> sardist::Result<()> {
    let probes = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(50);
    for (name, cfg, steps) in [("transformer", ModelConfig::transformer(), 4), ("gru", ModelConfig::gru(), 6)] {
        let model = Model::new(ModelConfig { dropout: 0.0, ..cfg }, 1)?;
        let (window, target) = probe_inputs(&model, steps, 2)?;
        let worst = gradient_check(&model, window.view(), target.view(), probes, 3)?;
        println!("{name:>11}: {} parameters, max relative error {worst:.2e} over {probes} weights", model.num_parameters());
    }
    Ok(())
}
