//! Seeded desk-scale benchmark: train the small transformer on a synthetic
//! corpus and compare it with the log-ratio detector on a held-out scene.
//!
//! `cargo run --release --example benchmark [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use sardist::evaluation::emit_comparison;
use sardist::protocol::{run_benchmark, BenchmarkConfig};

fn main() -> sardist::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let cfg = BenchmarkConfig::default();
    let start = Instant::now();
    let outcome = run_benchmark(&cfg, |r| {
        println!("epoch {:>2}  nll {:.4}  lr {:e}  ({:.0?})", r.epoch, r.mean_nll, r.lr, start.elapsed());
    })?;
    if let Some((epoch, batch)) = outcome.diverged_at {
        println!("training diverged at epoch {epoch}, batch {batch}");
    }
    let (t, l) = (&outcome.forecaster.report, &outcome.log_ratio.report);
    println!("transformer  PR-AUC {:.4}  best F1 {:.4} at {:.3} SD", t.pr_auc, t.best_f1, t.best_tau);
    println!("log-ratio    PR-AUC {:.4}  best F1 {:.4} at {:.3}", l.pr_auc, l.best_f1, l.best_tau);
    println!("total {:.1?}", start.elapsed());
    if let Some(dir) = out {
        emit_comparison(
            &[
                ("transformer", t, &outcome.forecaster.set),
                ("log-ratio", l, &outcome.log_ratio.set),
            ],
            &dir,
        )?;
        println!("plots written to {}", dir.display());
    }
    Ok(())
}
