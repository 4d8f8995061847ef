//! Generate a disturbed evaluation scene and a small undisturbed training
//! corpus.
//!
//! `cargo run --release --example synth_scene [out_dir]`

use std::path::PathBuf;

use sardist::raster::{write_mask, write_rts};
use sardist::synth::{count_components, generate, generate_training_corpus, SynthConfig};

fn main() -> sardist::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("synth_out"), PathBuf::from);
    std::fs::create_dir_all(&out)?;

    let cfg = SynthConfig::benchmark_scene(7);
    let (stack, truth) = generate(&cfg)?;
    write_rts(&stack, &out.join("scene.rts"))?;
    write_mask(&out.join("truth.rts"), &truth)?;
    let disturbed = truth.iter().filter(|&&m| m).count();
    println!(
        "scene {}x{}x{}, {} disturbed pixels ({:.1}%) in {} component(s)",
        stack.num_steps(),
        stack.height(),
        stack.width(),
        disturbed,
        100.0 * disturbed as f64 / truth.len() as f64,
        count_components(&truth)
    );

    let manifest = generate_training_corpus(&SynthConfig { seed: 1, ..SynthConfig::default() }, 32, &out.join("corpus"))?;
    println!("corpus of {} sequences, first seed {}", manifest.entries.len(), manifest.entries[0].seed);
    Ok(())
}
