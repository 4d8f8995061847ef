//! Two-image evaluation: precision/recall under strict thresholding, PR-AUC,
//! F1 sweeps and static report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::DisturbanceMap;

/// Pre-event scores (all negative) followed by post-event scores, both
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMetricSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledMetricSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            bail!(Shape, "{} scores vs {} labels", scores.len(), labels.len());
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            bail!(Numeric, "non-finite score {s}");
        }
        let positives = labels.iter().filter(|l| **l).count();
        if positives == 0 || positives == labels.len() {
            bail!(Validation, "need at least one positive and one negative, got {positives} of {}", labels.len());
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn build_labeled_set(pre: &DisturbanceMap, post: &DisturbanceMap, truth: &Array2<bool>) -> Result<LabeledMetricSet> {
    if pre.values().dim() != post.values().dim() || post.values().dim() != truth.dim() {
        bail!(
            Shape,
            "pre {:?}, post {:?} and truth {:?} differ",
            pre.values().dim(),
            post.values().dim(),
            truth.dim()
        );
    }
    let scores = pre.values().iter().chain(post.values().iter()).copied().collect();
    let labels = std::iter::repeat_n(false, truth.len()).chain(truth.iter().copied()).collect();
    LabeledMetricSet::new(scores, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Ordered by decreasing `tau`, so recall is non-decreasing.
    pub pr_points: Vec<PrPoint>,
    pub pr_auc: f64,
    pub best_f1: f64,
    pub best_tau: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Thresholds at or above the maximum score; they predict nothing, so
    /// precision is undefined and F1 is taken as 0.
    pub zero_prediction_taus: Vec<f64>,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scores sorted descending with positive counts, from which the confusion
/// counts at any threshold follow by binary search.
struct Ranked {
    desc: Vec<f64>,
    /// `cum_pos[k]` positives among the top `k` scores.
    cum_pos: Vec<usize>,
    positives: usize,
}

impl Ranked {
    fn new(set: &LabeledMetricSet) -> Self {
        let mut pairs: Vec<(f64, bool)> = set.scores.iter().copied().zip(set.labels.iter().copied()).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut cum_pos = Vec::with_capacity(pairs.len() + 1);
        cum_pos.push(0);
        for (_, l) in &pairs {
            cum_pos.push(cum_pos.last().unwrap() + usize::from(*l));
        }
        Self { desc: pairs.iter().map(|p| p.0).collect(), positives: set.positives(), cum_pos }
    }

    /// `(predicted, true_positives)` for `score > tau`.
    fn counts(&self, tau: f64) -> (usize, usize) {
        let predicted = self.desc.partition_point(|&s| s > tau);
        (predicted, self.cum_pos[predicted])
    }

    fn point(&self, tau: f64) -> Option<PrPoint> {
        let (predicted, tp) = self.counts(tau);
        if predicted == 0 {
            return None;
        }
        let precision = tp as f64 / predicted as f64;
        let recall = tp as f64 / self.positives as f64;
        Some(PrPoint { tau, precision, recall, f1: f1(precision, recall) })
    }

    /// Every distinct operating point: one threshold below the minimum score,
    /// then each unique score, in decreasing order.
    fn all_thresholds(&self) -> Vec<f64> {
        let mut taus: Vec<f64> = Vec::with_capacity(self.desc.len() + 1);
        for &s in &self.desc {
            if taus.last() != Some(&s) {
                taus.push(s);
            }
        }
        taus.push(self.desc.last().unwrap().next_down());
        taus
    }
}

/// Trapezoidal area under `(recall, precision)` for points ordered by
/// decreasing threshold, starting from recall 0 at the first point's
/// precision.
pub fn trapezoid_auc(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let (mut r0, mut p0) = (0.0, first.precision);
    let mut area = 0.0;
    for p in points {
        area += (p.recall - r0) * (p.precision + p0) / 2.0;
        r0 = p.recall;
        p0 = p.precision;
    }
    area
}

fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..k).map(|i| ((i as f64) * (n - 1) as f64 / (k - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

/// PR curve over at most `max_points` score quantiles plus the exact best-F1
/// threshold. The AUC integrates every distinct operating point.
pub fn pr_curve(set: &LabeledMetricSet, max_points: usize) -> Result<EvalReport> {
    if max_points < 2 {
        bail!(Validation, "max_points must be at least 2, got {max_points}");
    }
    let ranked = Ranked::new(set);
    let taus = ranked.all_thresholds();
    let mut full = Vec::with_capacity(taus.len());
    let mut zero_prediction_taus = Vec::new();
    for &tau in &taus {
        match ranked.point(tau) {
            Some(p) => full.push(p),
            None => zero_prediction_taus.push(tau),
        }
    }
    let best = *full
        .iter()
        .reduce(|best, p| if p.f1 > best.f1 { p } else { best })
        .expect("at least one threshold predicts every sample");
    let mut points: Vec<PrPoint> = evenly_spaced(full.len(), max_points).into_iter().map(|i| full[i]).collect();
    if !points.iter().any(|p| p.tau == best.tau) {
        let at = points.partition_point(|p| p.tau > best.tau);
        points.insert(at, best);
    }
    Ok(EvalReport {
        pr_auc: trapezoid_auc(&full),
        pr_points: points,
        best_f1: best.f1,
        best_tau: best.tau,
        positives: ranked.positives,
        negatives: set.len() - ranked.positives,
        zero_prediction_taus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Row {
    pub tau: f64,
    /// `tau / max(score)`
    pub tau_normalized: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// F1 at each threshold; thresholds that predict nothing get precision 0 and
/// F1 0.
pub fn f1_vs_threshold(set: &LabeledMetricSet, thresholds: &[f64]) -> Vec<F1Row> {
    let ranked = Ranked::new(set);
    let max = ranked.desc[0];
    thresholds
        .iter()
        .map(|&tau| {
            let p = ranked.point(tau).unwrap_or(PrPoint { tau, precision: 0.0, recall: 0.0, f1: 0.0 });
            let tau_normalized = if max > 0.0 { tau / max } else { 0.0 };
            F1Row { tau, tau_normalized, precision: p.precision, recall: p.recall, f1: p.f1 }
        })
        .collect()
}

/// `n` thresholds evenly spaced on `[0, max score]`.
pub fn threshold_grid(set: &LabeledMetricSet, n: usize) -> Vec<f64> {
    let max = set.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n < 2 {
        return vec![0.0];
    }
    (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect()
}

pub fn pr_curve_csv(report: &EvalReport) -> String {
    let mut out = String::from("tau,precision,recall,f1\n");
    for p in &report.pr_points {
        writeln!(out, "{},{},{},{}", p.tau, p.precision, p.recall, p.f1).unwrap();
    }
    out
}

pub fn f1_csv(rows: &[F1Row]) -> String {
    let mut out = String::from("tau,tau_normalized,f1\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.tau, r.tau_normalized, r.f1).unwrap();
    }
    out
}

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        let mut body = String::new();
        let (w, h) = (PLOT_W + 2.0 * MARGIN, PLOT_H + 2.0 * MARGIN);
        writeln!(body, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
        writeln!(body, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
        writeln!(
            body,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="black"/>"#
        )
        .unwrap();
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let x = MARGIN + f * PLOT_W;
            let y = MARGIN + PLOT_H - f * PLOT_H;
            let label_y = MARGIN + PLOT_H + 16.0;
            writeln!(body, r#"<text x="{x:.2}" y="{label_y:.2}" font-size="11" text-anchor="middle">{f:.2}</text>"#).unwrap();
            writeln!(body, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{f:.2}</text>"#, MARGIN - 4.0, y + 4.0)
                .unwrap();
        }
        writeln!(body, r#"<text x="{:.2}" y="24" font-size="14" text-anchor="middle">{}</text>"#, MARGIN + PLOT_W / 2.0, escape(title))
            .unwrap();
        writeln!(
            body,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            MARGIN + PLOT_W / 2.0,
            MARGIN + PLOT_H + 36.0,
            escape(x_label)
        )
        .unwrap();
        writeln!(
            body,
            r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            MARGIN + PLOT_H / 2.0,
            MARGIN + PLOT_H / 2.0,
            escape(y_label)
        )
        .unwrap();
        Self { body }
    }

    fn map(x: f64, y: f64) -> (f64, f64) {
        (MARGIN + x.clamp(0.0, 1.0) * PLOT_W, MARGIN + PLOT_H - y.clamp(0.0, 1.0) * PLOT_H)
    }

    fn line(&mut self, pts: &[(f64, f64)], color: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = Self::map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        writeln!(self.body, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" ")).unwrap();
    }

    fn star(&mut self, x: f64, y: f64, color: &str) {
        let (cx, cy) = Self::map(x, y);
        let pts: Vec<String> = (0..10)
            .map(|k| {
                let r = if k % 2 == 0 { 8.0 } else { 3.5 };
                let a = std::f64::consts::PI * (k as f64) / 5.0 - std::f64::consts::FRAC_PI_2;
                format!("{:.2},{:.2}", cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        writeln!(self.body, r#"<polygon fill="{color}" stroke="black" stroke-width="0.5" points="{}"/>"#, pts.join(" ")).unwrap();
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let y = MARGIN + 16.0 + 16.0 * i as f64;
            let x = MARGIN + PLOT_W - 150.0;
            let color = COLORS[i % COLORS.len()];
            writeln!(self.body, r#"<line x1="{x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#, y - 4.0, x + 18.0, y - 4.0)
                .unwrap();
            writeln!(self.body, r#"<text x="{:.2}" y="{y:.2}" font-size="11">{}</text>"#, x + 24.0, escape(name)).unwrap();
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// PR curves, one per named report, each with its best-F1 point starred.
pub fn pr_curve_svg(reports: &[(&str, &EvalReport)]) -> String {
    let mut svg = Svg::new("Precision-recall", "recall", "precision");
    for (i, (_, r)) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = vec![(0.0, r.pr_points.first().map_or(0.0, |p| p.precision))];
        pts.extend(r.pr_points.iter().map(|p| (p.recall, p.precision)));
        svg.line(&pts, color);
        if let Some(best) = r.pr_points.iter().find(|p| p.tau == r.best_tau) {
            svg.star(best.recall, best.precision, color);
        }
    }
    let names: Vec<String> = reports.iter().map(|(n, r)| format!("{n} (AUC {:.3})", r.pr_auc)).collect();
    svg.legend(&names.iter().map(String::as_str).collect::<Vec<_>>());
    svg.finish()
}

/// F1 against the threshold as a fraction of each method's maximum score.
pub fn f1_svg(tables: &[(&str, &[F1Row])]) -> String {
    let mut svg = Svg::new("F1 vs threshold", "threshold / max score", "F1");
    for (i, (_, rows)) in tables.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.tau_normalized, r.f1)).collect();
        svg.line(&pts, COLORS[i % COLORS.len()]);
    }
    svg.legend(&tables.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    svg.finish()
}

/// Number of thresholds in the emitted F1 sweep.
pub const F1_GRID: usize = 101;

/// Writes `pr_curve.csv`, `f1_vs_tau.csv`, `pr_curve.svg` and
/// `f1_vs_tau.svg`.
pub fn emit_report(report: &EvalReport, set: &LabeledMetricSet, name: &str, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let rows = f1_vs_threshold(set, &threshold_grid(set, F1_GRID));
    fs::write(out_dir.join("pr_curve.csv"), pr_curve_csv(report))?;
    fs::write(out_dir.join("f1_vs_tau.csv"), f1_csv(&rows))?;
    fs::write(out_dir.join("pr_curve.svg"), pr_curve_svg(&[(name, report)]))?;
    fs::write(out_dir.join("f1_vs_tau.svg"), f1_svg(&[(name, &rows)]))?;
    Ok(())
}

/// Overlaid PR and normalized-threshold F1 plots for several methods on the
/// same labeled pixels.
pub fn emit_comparison(methods: &[(&str, &EvalReport, &LabeledMetricSet)], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let tables: Vec<Vec<F1Row>> = methods.iter().map(|(_, _, s)| f1_vs_threshold(s, &threshold_grid(s, F1_GRID))).collect();
    let reports: Vec<(&str, &EvalReport)> = methods.iter().map(|(n, r, _)| (*n, *r)).collect();
    let f1_tables: Vec<(&str, &[F1Row])> = methods.iter().zip(&tables).map(|((n, _, _), t)| (*n, t.as_slice())).collect();
    fs::write(out_dir.join("compare_pr.svg"), pr_curve_svg(&reports))?;
    fs::write(out_dir.join("compare_f1.svg"), f1_svg(&f1_tables))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::MetricUnits;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic-time reference: every distinct threshold, counted directly.
    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut taus: Vec<f64> = scores.to_vec();
        taus.sort_by(|a, b| b.total_cmp(a));
        taus.dedup();
        taus.push(f64::NEG_INFINITY);
        let pos = labels.iter().filter(|l| **l).count() as f64;
        let mut pts = Vec::new();
        for tau in taus {
            let (mut tp, mut pred) = (0.0, 0.0);
            for (s, l) in scores.iter().zip(labels) {
                if *s > tau {
                    pred += 1.0;
                    if *l {
                        tp += 1.0;
                    }
                }
            }
            if pred > 0.0 {
                pts.push((tp / pos, tp / pred));
            }
        }
        let mut area = 0.0;
        let (mut r0, mut p0) = (0.0, pts[0].1);
        for (r, p) in pts {
            area += (r - r0) * (p + p0) / 2.0;
            r0 = r;
            p0 = p;
        }
        area
    }

    fn set(scores: &[f64], labels: &[u8]) -> LabeledMetricSet {
        LabeledMetricSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn labeled_set_layout() {
        let m = |v: Array2<f64>| DisturbanceMap::new(v, MetricUnits::StandardDeviations).unwrap();
        let pre = m(array![[0.1, 0.2], [0.3, 0.4]]);
        let post = m(array![[1.1, 1.2], [1.3, 1.4]]);
        let none = Array2::from_elem((2, 2), false);
        assert!(matches!(build_labeled_set(&pre, &post, &none), Err(crate::Error::Validation(_))));
        let truth = array![[true, false], [false, true]];
        let s = build_labeled_set(&pre, &post, &truth).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.positives(), 2);
        assert_eq!(s.scores(), &[0.1, 0.2, 0.3, 0.4, 1.1, 1.2, 1.3, 1.4]);
        assert_eq!(s.labels(), &[false, false, false, false, true, false, false, true]);
        assert!(build_labeled_set(&pre, &post, &Array2::from_elem((2, 3), true)).is_err());
    }

    #[test]
    fn hand_case() {
        let s = set(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]);
        let r = pr_curve(&s, 512).unwrap();
        assert!((r.best_f1 - 0.8).abs() < 1e-12);
        // strict `>`: F1 is 0.8 for every tau in [0.6, 0.7)
        assert!(r.best_tau >= 0.6 && r.best_tau < 0.7);
        assert!((r.pr_auc - brute_force_auc(s.scores(), s.labels())).abs() < 1e-12);
        assert!((r.pr_auc - 0.791_666_666_666_666_6).abs() < 1e-12);
        assert_eq!(r.zero_prediction_taus, vec![0.9]);
    }

    #[test]
    fn separable_and_constant_scores() {
        let s = set(&[0.1, 0.2, 0.3, 0.8, 0.9], &[0, 0, 0, 1, 1]);
        let r = pr_curve(&s, 512).unwrap();
        assert_eq!((r.pr_auc, r.best_f1), (1.0, 1.0));
        let s = set(&[0.5; 8], &[1, 0, 0, 0, 1, 0, 0, 0]);
        let r = pr_curve(&s, 512).unwrap();
        assert_eq!(r.pr_points.len(), 1);
        assert_eq!((r.pr_points[0].precision, r.pr_points[0].recall), (0.25, 1.0));
    }

    #[test]
    fn downsampled_curve_keeps_best_point_and_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.4 } else { 0.0 }).collect();
        let s = LabeledMetricSet::new(scores.clone(), labels.clone()).unwrap();
        let r = pr_curve(&s, 512).unwrap();
        assert!(r.pr_points.len() <= 513);
        assert!(r.pr_points.iter().any(|p| p.tau == r.best_tau && p.f1 == r.best_f1));
        let exact = brute_force_auc(&scores, &labels);
        assert!((r.pr_auc - exact).abs() < 1e-9);
        assert!((trapezoid_auc(&r.pr_points) - exact).abs() < 0.005);
        for w in r.pr_points.windows(2) {
            assert!(w[0].tau > w[1].tau && w[0].recall <= w[1].recall);
        }
    }

    #[test]
    fn random_classifier_area_is_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let r = pr_curve(&LabeledMetricSet::new(scores, labels).unwrap(), 512).unwrap();
        assert!((r.pr_auc - 0.5).abs() < 0.05, "{}", r.pr_auc);
    }

    #[test]
    fn f1_table_conventions() {
        let s = set(&[0.2, 0.4, 0.6, 0.8], &[0, 1, 0, 1]);
        let rows = f1_vs_threshold(&s, &[0.0, 0.5, 0.8, 1.0]);
        assert_eq!(rows[0].recall, 1.0);
        assert_eq!((rows[2].f1, rows[3].f1), (0.0, 0.0));
        assert_eq!(rows[2].tau_normalized, 1.0);
        assert_eq!(rows[1].tau_normalized, 0.625);
    }

    #[test]
    fn report_files_are_deterministic_and_well_formed() {
        let s = set(&[0.9, 0.8, 0.7, 0.6, 0.1], &[1, 0, 1, 0, 0]);
        let r = pr_curve(&s, 512).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(&r, &s, "transformer", a.path()).unwrap();
        emit_report(&r, &s, "transformer", b.path()).unwrap();
        for f in ["pr_curve.csv", "f1_vs_tau.csv", "pr_curve.svg", "f1_vs_tau.svg"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let csv = fs::read_to_string(a.path().join("pr_curve.csv")).unwrap();
        assert_eq!(csv.lines().count(), r.pr_points.len() + 1);
        let f1 = fs::read_to_string(a.path().join("f1_vs_tau.csv")).unwrap();
        assert!(f1.starts_with("tau,tau_normalized,f1\n"));
        assert_eq!(f1.lines().count(), F1_GRID + 1);
        for f in ["pr_curve.svg", "f1_vs_tau.svg"] {
            let text = fs::read_to_string(a.path().join(f)).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            assert!(!doc.descendants().any(|n| n.tag_name().name() == "script"));
        }
        emit_comparison(&[("a", &r, &s), ("b<&>", &r, &s)], a.path()).unwrap();
        roxmltree::Document::parse(&fs::read_to_string(a.path().join("compare_pr.svg")).unwrap()).unwrap();
    }

    proptest! {
        #[test]
        fn recall_is_monotone(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = (0..50).map(|_| rng.random_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..50).map(|_| rng.random()).collect();
            let s = LabeledMetricSet::new(scores, labels).unwrap();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let rows = f1_vs_threshold(&s, &[lo, hi]);
            prop_assert!(rows[0].recall >= rows[1].recall);
        }

        #[test]
        fn auc_matches_brute_force(seed in any::<u64>(), n in 2usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            // coarse scores force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
            let s = LabeledMetricSet::new(scores.clone(), labels.clone()).unwrap();
            let r = pr_curve(&s, 512).unwrap();
            prop_assert!((r.pr_auc - brute_force_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.pr_auc));
        }
    }
}
