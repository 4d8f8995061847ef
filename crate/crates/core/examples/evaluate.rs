//! Two-image evaluation of the log-ratio detector with CSV and SVG reports.
//!
//! `cargo run --release --example evaluate [out_dir]`

use std::path::PathBuf;

use sardist::evaluation::emit_report;
use sardist::preprocess::PreprocessConfig;
use sardist::protocol::evaluate_log_ratio;
use sardist::synth::{generate, SynthConfig};

fn main() -> sardist::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("eval_out"), PathBuf::from);
    let (stack, truth) = generate(&SynthConfig::benchmark_scene(2))?;
    let result = evaluate_log_ratio(&stack, &truth, &PreprocessConfig::default(), false, 512)?;
    let r = &result.report;
    println!("{} positives, {} negatives", r.positives, r.negatives);
    println!("PR-AUC {:.4}, best F1 {:.4} at tau {:.4}", r.pr_auc, r.best_f1, r.best_tau);
    emit_report(r, &result.set, "log-ratio", &out)?;
    println!("report written to {}", out.display());
    Ok(())
}
