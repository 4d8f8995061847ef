//! Train a forecaster on a synthetic corpus and save a checkpoint with its
//! loss curve.
//!
//! `cargo run --release --example train_forecaster [transformer|gru] [out_dir]`

use std::path::PathBuf;

use sardist::model::{Model, ModelConfig};
use sardist::synth::{generate_corpus_tiles, SynthConfig};
use sardist::preprocess::PreprocessConfig;
use sardist::training::{train, write_loss_curve, Corpus, TrainConfig};

fn main() -> sardist::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = args.next().unwrap_or_else(|| "transformer".into());
    let out = args.next().map_or_else(|| PathBuf::from("checkpoint"), PathBuf::from);
    let model_cfg = match kind.as_str() {
        "gru" => ModelConfig { d_model: 96, head_hidden: 192, num_layers: 2, ..ModelConfig::gru() },
        _ => ModelConfig { ff_dim: 256, head_hidden: 256, num_layers: 2, ..ModelConfig::transformer() },
    };
    let stacks = generate_corpus_tiles(&SynthConfig { seed: 1, ..SynthConfig::default() }, 128, model_cfg.input_size)?;
    let corpus = Corpus::from_stacks(&stacks, &PreprocessConfig::default(), true)?;
    let cfg = TrainConfig { batch_size: 4, epochs: 3, lr_initial: 3e-4, lr_after_decay: 3e-5, decay_epoch: 2, ..TrainConfig::default() };
    let model = Model::new(model_cfg, 3)?;
    println!("{kind}: {} parameters", model.num_parameters());
    let outcome = train(model, &cfg, &corpus, |r| println!("epoch {}  nll {:.4}  lr {:e}", r.epoch, r.mean_nll, r.lr))?;
    outcome.model.save(&out)?;
    write_loss_curve(&out.join("loss_curve.csv"), &outcome.curve)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
