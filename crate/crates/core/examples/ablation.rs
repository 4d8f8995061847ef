//! Preset grids for input/patch size, model size and learning rate. Prints
//! parameter counts; with `run` it trains and evaluates every preset.
//!
//! `cargo run --release --example ablation [input_patch|model_size|learning_rate] [run]`

use sardist::model::parameter_count;
use sardist::protocol::{ablation_csv, run_ablation, AblationGrid, BenchmarkConfig};

fn main() -> sardist::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = match args.next().as_deref() {
        Some("input_patch") => AblationGrid::InputPatch,
        Some("learning_rate") => AblationGrid::LearningRate,
        _ => AblationGrid::ModelSize,
    };
    let base = BenchmarkConfig::default();
    for (label, cfg) in grid.presets(&base) {
        println!("{label:<16} {:>9} parameters", parameter_count(&cfg.model));
    }
    if args.next().as_deref() == Some("run") {
        let rows = run_ablation(grid, &base, |r| println!("{}: PR-AUC {:.4}", r.label, r.pr_auc))?;
        print!("{}", ablation_csv(&rows));
    }
    Ok(())
}
