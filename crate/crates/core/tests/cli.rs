use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::{Array4, Axis};
use sardist::cli::RunManifest;
use sardist::disturbance::temporal_median;
use sardist::raster::{read_mask, read_metric, write_container, RtsHeader};
use serde_json::Value;

fn sardist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sardist"))
        .args(args)
        .env_remove("SARDIST_THREADS")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    sardist(args).status.code().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn manifest(p: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn synth_twice_gives_identical_files() {
    let d = tempfile::tempdir().unwrap();
    for (s, m) in [("a.rts", "am.rts"), ("b.rts", "bm.rts")] {
        assert_eq!(code(&["synth", "--seed", "7", "--out", &path(d.path(), s), "--mask", &path(d.path(), m)]), 0);
    }
    assert_eq!(fs::read(d.path().join("a.rts")).unwrap(), fs::read(d.path().join("b.rts")).unwrap());
    assert_eq!(fs::read(d.path().join("am.rts")).unwrap(), fs::read(d.path().join("bm.rts")).unwrap());
    let m = manifest(&d.path().join("a.rts.manifest.json"));
    assert_eq!((m.subcommand.as_str(), m.status.as_str(), m.seed), ("synth", "ok", Some(7)));
    assert_eq!(m.outputs.len(), 2);
    assert_eq!(m.config["synth"]["seed"], 7);
}

fn write_frames(p: &Path, data: &Array4<f32>) {
    let (t, c, h, w) = data.dim();
    let header = RtsHeader::new([t, c, h, w], sardist::synth::timestamps(t), sardist::raster::default_pol_names());
    write_container(p, &header, data.view()).unwrap();
}

#[test]
fn log_ratio_against_own_median_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let mut state = 1u64;
    let pre = Array4::from_shape_simple_fn((5, 2, 6, 7), || {
        (sardist::synth::splitmix64(&mut state) % 9000 + 100) as f32 / 10_000.0
    });
    let median = temporal_median(pre.mapv(f64::from).view()).mapv(|v| v as f32);
    write_frames(&d.path().join("pre.rts"), &pre);
    write_frames(&d.path().join("post.rts"), &median.insert_axis(Axis(0)));
    let out = d.path().join("lr.rts");
    let args = ["metric", "--kind", "logratio", "--pre", &path(d.path(), "pre.rts"), "--post", &path(d.path(), "post.rts"), "--out", &out.display().to_string()];
    assert_eq!(code(&args), 0);
    let map = read_metric(&out).unwrap();
    assert!(map.values().iter().all(|&v| v == 0.0));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = sardist(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_input_is_io_error_with_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = path(d.path(), "x.rts");
    assert_eq!(code(&["despeckle", "--input", &path(d.path(), "absent.rts"), "--out", &out]), 2);
    let m = manifest(&d.path().join("x.rts.manifest.json"));
    assert_eq!((m.status.as_str(), m.exit_code), ("error", 2));
    assert!(m.error.unwrap().contains("absent.rts"));
}

#[test]
fn invalid_parameter_is_validation_error_with_manifest() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth", "--seed", "1", "--out", &path(d.path(), "s.rts"), "--mask", &path(d.path(), "m.rts")]), 0);
    let out = path(d.path(), "sd.rts");
    assert_eq!(code(&["despeckle", "--input", &path(d.path(), "s.rts"), "--out", &out, "--tv-weight=-1"]), 1);
    let m = manifest(&d.path().join("sd.rts.manifest.json"));
    assert_eq!((m.status.as_str(), m.exit_code), ("error", 1));
    assert!(!d.path().join("sd.rts").exists());
}

#[test]
fn out_of_range_input_needs_allow_raw() {
    let d = tempfile::tempdir().unwrap();
    let data = Array4::from_shape_fn((3, 2, 8, 8), |(t, _, i, _)| if i == 0 && t == 1 { 1.5f32 } else { 0.2 });
    write_frames(&d.path().join("raw.rts"), &data);
    let args = |extra: &'static str| {
        let mut v = vec!["despeckle".to_string(), "--input".into(), path(d.path(), "raw.rts"), "--out".into(), path(d.path(), "c.rts")];
        if !extra.is_empty() {
            v.push(extra.into());
        }
        v
    };
    let run = |v: Vec<String>| code(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(run(args("")), 1);
    assert_eq!(run(args("--allow-raw")), 0);
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth", "--seed", "2", "--height", "20", "--width", "20", "--out", &path(d.path(), "s.rts"), "--mask", &path(d.path(), "m.rts")]), 0);
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, r#"{"preprocess": {"tv_weight": 2.5, "tv_iters": 7}}"#).unwrap();
    let args = ["--config", &cfg.display().to_string(), "despeckle", "--input", &path(d.path(), "s.rts"), "--out", &path(d.path(), "sd.rts"), "--tv-iters", "3"];
    assert_eq!(code(&args), 0);
    let m = manifest(&d.path().join("sd.rts.manifest.json"));
    assert_eq!(m.config["preprocess"]["tv_weight"], 2.5);
    assert_eq!(m.config["preprocess"]["tv_iters"], 3);
    fs::write(&cfg, r#"{"preprocess": {"tv_wieght": 2.5}}"#).unwrap();
    assert_eq!(code(&args), 1);
}

#[test]
fn delineate_thresholds_strictly() {
    let d = tempfile::tempdir().unwrap();
    let values = ndarray::array![[0.5, 3.0], [3.5, 9.0]];
    let map = sardist::raster::DisturbanceMap::new(values, sardist::raster::MetricUnits::StandardDeviations).unwrap();
    sardist::raster::write_metric(&d.path().join("d.rts"), &map).unwrap();
    assert_eq!(code(&["delineate", "--metric", &path(d.path(), "d.rts"), "--out", &path(d.path(), "mask.rts")]), 0);
    assert_eq!(read_mask(&d.path().join("mask.rts")).unwrap(), ndarray::array![[false, false], [true, true]]);
}

#[test]
fn selftest_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = sardist(&["selftest", "--out-dir", &d.path().display().to_string()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    let report: Value = serde_json::from_slice(&fs::read(d.path().join("selftest.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), text.lines().count());
    assert!(d.path().join("run_manifest.json").exists());
}

/// synth -> despeckle -> train -> estimate -> metric -> delineate -> eval at
/// the benchmark settings.
#[test]
fn full_pipeline_on_default_benchmark() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| path(d.path(), n);
    let ok = |args: &[&str]| {
        let out = sardist(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["synth", "--seed", "2", "--out", &p("scene.rts"), "--mask", &p("truth.rts")]);
    ok(&["synth", "--seed", "1", "--corpus", "512", "--out-dir", &p("corpus")]);
    ok(&["despeckle", "--input", &p("scene.rts"), "--out", &p("scene_tv.rts")]);
    let cfg = d.path().join("bench.json");
    let bench = sardist::protocol::BenchmarkConfig::default();
    fs::write(&cfg, serde_json::json!({ "model": bench.model, "train": bench.train }).to_string()).unwrap();
    ok(&["--config", &cfg.display().to_string(), "train", "--corpus", &p("corpus/manifest.json"), "--out", &p("ck"), "--model-seed", &bench.model_seed.to_string()]);
    ok(&["estimate", "--checkpoint", &p("ck"), "--input", &p("scene_tv.rts"), "--baseline-len", "9", "--despeckle", "false", "--out", &p("mu.rts"), &p("sigma.rts")]);
    ok(&["metric", "--kind", "mahalanobis", "--mu", &p("mu.rts"), "--sigma", &p("sigma.rts"), "--post", &p("scene_tv.rts"), "--despeckle", "false", "--out", &p("d.rts")]);
    ok(&["delineate", "--metric", &p("d.rts"), "--tau", "3", "--out", &p("mask.rts")]);
    ok(&["eval", "--checkpoint", &p("ck"), "--input", &p("scene.rts"), "--truth", &p("truth.rts"), "--out-dir", &p("report")]);

    let csv = fs::read_to_string(d.path().join("report/pr_curve.csv")).unwrap();
    assert!(csv.starts_with("tau,precision,recall,f1\n"));
    let summary: Value = serde_json::from_slice(&fs::read(d.path().join("report/summary.json")).unwrap()).unwrap();
    let auc = summary["transformer"]["pr_auc"].as_f64().unwrap();
    assert!(auc >= 0.85, "PR-AUC {auc}");

    // the standalone metric scores the post frame against the baseline forecast
    let metric = read_metric(&d.path().join("d.rts")).unwrap();
    let truth = read_mask(&d.path().join("truth.rts")).unwrap();
    let (inside, outside) = sardist::protocol::masked_means(metric.values(), &truth);
    assert!(inside > 3.0 * outside, "{inside} vs {outside}");
    let mask = read_mask(&d.path().join("mask.rts")).unwrap();
    assert_eq!(mask, metric.values().mapv(|v| v > 3.0));
}
