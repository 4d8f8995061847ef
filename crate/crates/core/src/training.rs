//! Self-supervised training: Gaussian NLL of the next frame, variable-length
//! baselines, Adam with a one-step learning-rate decay, and a
//! finite-difference gradient check.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::gaussian_nll_mean;
use crate::error::{bail, Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::preprocess::{prepare_logit, PreprocessConfig};
use crate::raster::{DistributionEstimate, RasterStack};
use crate::synth::splitmix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after_decay: f64,
    /// Last epoch (1-based) trained at `lr_initial`.
    pub decay_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub seed: u64,
    /// Samples per gradient task. Fixed independently of the thread count so
    /// that results do not depend on parallelism.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 50,
            lr_initial: 1e-4,
            lr_after_decay: 1e-5,
            decay_epoch: 25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            t_min: 2,
            t_max: 10,
            seed: 0,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.chunk_size == 0 {
            bail!(Validation, "batch_size, epochs and chunk_size must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_after_decay > 0.0) || self.lr_after_decay > self.lr_initial {
            bail!(
                Validation,
                "learning rates must satisfy 0 < lr_after_decay <= lr_initial ({} vs {})",
                self.lr_after_decay,
                self.lr_initial
            );
        }
        if !(2 <= self.t_min && self.t_min <= self.t_max && self.t_max <= model.max_t) {
            bail!(
                Validation,
                "need 2 <= t_min <= t_max <= max_t, got {} / {} / {}",
                self.t_min,
                self.t_max,
                model.max_t
            );
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_epoch {
            self.lr_initial
        } else {
            self.lr_after_decay
        }
    }
}

/// Mean per-pixel Gaussian NLL of `target` under `est`.
pub fn nll_loss(est: &DistributionEstimate, target: ArrayView3<f64>) -> Result<f64> {
    if est.mu.dim() != target.dim() {
        bail!(Shape, "estimate {:?} vs target {:?}", est.mu.dim(), target.dim());
    }
    if let Some(s) = est.sigma.iter().find(|s| !(**s > 0.0)) {
        bail!(Domain, "sigma must be positive, got {s}");
    }
    let (c, h, w) = target.dim();
    let flat = |a: ArrayView3<f64>| a.to_shape((c, h * w)).unwrap().to_owned();
    Ok(gaussian_nll_mean(flat(est.mu.view()).view(), flat(est.sigma.view()).view(), flat(target).view()))
}

/// Logit-space training sequences, all `(T_total, C, S, S)`.
#[derive(Debug, Clone)]
pub struct Corpus {
    sequences: Vec<Array4<f64>>,
}

impl Corpus {
    pub fn new(sequences: Vec<Array4<f64>>) -> Result<Self> {
        let Some(first) = sequences.first() else { bail!(Validation, "empty corpus") };
        if sequences.iter().any(|s| s.dim() != first.dim()) {
            bail!(Shape, "corpus sequences differ in shape");
        }
        Ok(Self { sequences })
    }

    /// Clip, optionally despeckle, and logit-transform every stack.
    pub fn from_stacks(stacks: &[RasterStack], pre: &PreprocessConfig, despeckle: bool) -> Result<Self> {
        let seqs = stacks
            .par_iter()
            .map(|s| prepare_logit(s, pre, despeckle))
            .collect::<Result<Vec<_>>>()?;
        Self::new(seqs)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence_len(&self) -> usize {
        self.sequences[0].dim().0
    }

    pub fn sequences(&self) -> &[Array4<f64>] {
        &self.sequences
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub sequence: usize,
    pub window_len: usize,
    /// 0-based frame index of the target within its source sequence.
    pub target_index: usize,
}

/// Baseline windows (frames `0..T`) and their next-frame targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub windows: Vec<Array4<f64>>,
    pub targets: Vec<Array3<f64>>,
    pub provenance: Vec<Provenance>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Builds the batch for the given sequence indices and window length.
pub fn assemble_batch(corpus: &Corpus, members: &[usize], window_len: usize) -> Result<Batch> {
    if corpus.sequence_len() < window_len + 1 {
        bail!(
            Contract,
            "sequences have {} frames, need {} for a window of {window_len}",
            corpus.sequence_len(),
            window_len + 1
        );
    }
    let mut batch = Batch { windows: Vec::new(), targets: Vec::new(), provenance: Vec::new() };
    for &i in members {
        let seq = &corpus.sequences[i];
        batch.windows.push(seq.slice(s![..window_len, .., .., ..]).to_owned());
        batch.targets.push(seq.slice(s![window_len, .., .., ..]).to_owned());
        batch.provenance.push(Provenance { sequence: i, window_len, target_index: window_len });
    }
    Ok(batch)
}

/// Draws `batch_size` distinct sequences (or the whole corpus if smaller) and
/// one window length uniform in `[t_min, t_max]`.
pub fn sample_batch<R: Rng>(corpus: &Corpus, rng: &mut R, cfg: &TrainConfig) -> Result<Batch> {
    if corpus.sequence_len() < cfg.t_max + 1 {
        bail!(Contract, "corpus sequences shorter than t_max + 1");
    }
    let window_len = rng.random_range(cfg.t_min..=cfg.t_max);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    order.truncate(cfg.batch_size);
    assemble_batch(corpus, &order, window_len)
}

/// Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut [Array2<f64>], grads: &[Array2<f64>], state: &mut AdamState, hp: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        bail!(Shape, "parameter, gradient and state counts differ");
    }
    for (p, g) in params.iter().zip(grads) {
        if p.dim() != g.dim() {
            bail!(Shape, "gradient shape {:?} vs parameter {:?}", g.dim(), p.dim());
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient; step rejected".into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        });
    }
    Ok(())
}

fn chunk_seed(seed: u64, epoch: usize, batch: usize, chunk: usize) -> u64 {
    let mut state = seed ^ ((epoch as u64) << 40) ^ ((batch as u64) << 20) ^ chunk as u64;
    splitmix64(&mut state)
}

/// Batch-mean loss and gradient, computed chunk by chunk (possibly in
/// parallel) and reduced in chunk order.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &Batch,
    chunk_size: usize,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let n = batch.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(chunk_size).map(|s| (s, (s + chunk_size).min(n))).collect();
    let parts = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, &(a, b))| {
            let windows: Vec<ArrayView4<f64>> = batch.windows[a..b].iter().map(|w| w.view()).collect();
            let targets: Vec<ArrayView3<f64>> = batch.targets[a..b].iter().map(|t| t.view()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
            model.loss_and_grad(&windows, &targets, mode, Some(&mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grads: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    for ((l, g), &(a, b)) in parts.into_iter().zip(&chunks) {
        let w = (b - a) as f64 / n as f64;
        loss += w * l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.scaled_add(w, &gi);
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_nll: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final weights, or the last finite weights if training diverged.
    pub model: Model,
    pub curve: Vec<EpochRecord>,
    /// `(epoch, batch)` where a non-finite loss or gradient stopped training.
    pub diverged_at: Option<(usize, usize)>,
}

/// Runs the epoch loop. `on_epoch` sees each completed epoch.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate(model.config())?;
    if corpus.sequence_len() < cfg.t_max + 1 {
        bail!(Contract, "corpus sequences have {} frames, t_max {} needs {}", corpus.sequence_len(), cfg.t_max, cfg.t_max + 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let hp = AdamHyper { lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        // batch composition is fixed before any gradient work is dispatched
        let plan: Vec<(Vec<usize>, usize)> = order
            .chunks(cfg.batch_size)
            .map(|members| (members.to_vec(), rng.random_range(cfg.t_min..=cfg.t_max)))
            .collect();
        let mut total = 0.0;
        let mut seen = 0usize;
        for (bi, (members, window_len)) in plan.iter().enumerate() {
            let batch = assemble_batch(corpus, members, *window_len)?;
            let seed = chunk_seed(cfg.seed, epoch, bi, 0);
            let step = batch_loss_and_grad(&model, &batch, cfg.chunk_size, Mode::Train, seed)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!("loss {loss}")));
                    }
                    adam_step(model.params_mut(), &grads, &mut adam, hp)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => {
                    total += loss * batch.len() as f64;
                    seen += batch.len();
                }
                Err(Error::Numeric(_)) => {
                    return Ok(TrainOutcome { model, curve, diverged_at: Some((epoch, bi)) });
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord { epoch, mean_nll: total / seen as f64, lr };
        on_epoch(&record);
        curve.push(record);
    }
    Ok(TrainOutcome { model, curve, diverged_at: None })
}

/// `epoch,mean_nll,lr` rows.
pub fn loss_curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_nll,lr\n");
    for r in curve {
        writeln!(out, "{},{},{}", r.epoch, r.mean_nll, r.lr).unwrap();
    }
    out
}

pub fn write_loss_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    fs::write(path, loss_curve_csv(curve))?;
    Ok(())
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|g_fd - g| / max(|g_fd|, |g|, 1e-8)`
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` at the given
/// `(tensor, flat_index)` probes and returns the largest relative error.
pub fn check_gradients(
    params: &mut [Array2<f64>],
    analytic: &[Array2<f64>],
    probes: &[(usize, usize)],
    mut loss: impl FnMut(&[Array2<f64>]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &(ti, flat) in probes {
        let cols = params[ti].ncols();
        let ix = [flat / cols, flat % cols];
        let orig = params[ti][ix];
        params[ti][ix] = orig + FD_STEP;
        let up = loss(params);
        params[ti][ix] = orig - FD_STEP;
        let down = loss(params);
        params[ti][ix] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(numeric, analytic[ti][ix]));
    }
    worst
}

/// Picks `count` distinct scalar weights uniformly over the flattened
/// parameter vector.
pub fn random_probes(params: &[Array2<f64>], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, count.min(total));
    let mut probes: Vec<(usize, usize)> = picks
        .into_iter()
        .map(|mut flat| {
            let mut ti = 0;
            while flat >= sizes[ti] {
                flat -= sizes[ti];
                ti += 1;
            }
            (ti, flat)
        })
        .collect();
    probes.sort_unstable();
    probes
}

/// A window of logits uniform in `[-3, 3]` and a target drawn around the
/// model's own forecast, so the loss is of order one and finite differences
/// at [`FD_STEP`] resolve small attention gradients.
pub fn probe_inputs(model: &Model, steps: usize, seed: u64) -> Result<(Array4<f64>, Array3<f64>)> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = Array4::from_shape_simple_fn((steps, crate::raster::NUM_POLS, cfg.input_size, cfg.input_size), || {
        rng.random_range(-3.0..3.0)
    });
    let est = model.forward(window.view())?;
    let noise = rand_distr::Normal::new(0.0, 0.5).unwrap();
    let target = est.mu.mapv(|m| m + rand_distr::Distribution::sample(&noise, &mut rng));
    Ok((window, target))
}

/// Finite-difference check of the NLL gradient for one window, dropout off.
pub fn gradient_check(
    model: &Model,
    window: ArrayView4<f64>,
    target: ArrayView3<f64>,
    num_probes: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = model.loss_and_grad::<ChaCha8Rng>(&[window], &[target], Mode::Eval, None)?;
    let probes = random_probes(model.params(), num_probes, seed);
    let mut params = model.params().to_vec();
    let mut probe = model.clone();
    let worst = check_gradients(&mut params, &grads, &probes, |p| {
        probe.params_mut().clone_from_slice(p);
        probe.loss::<ChaCha8Rng>(&[window], &[target], Mode::Eval, None).unwrap_or(f64::NAN)
    });
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn est(mu: f64, sigma: f64) -> DistributionEstimate {
        DistributionEstimate::new(Array3::from_elem((2, 3, 3), mu), Array3::from_elem((2, 3, 3), sigma)).unwrap()
    }

    #[test]
    fn nll_reference_values() {
        let target = Array3::from_elem((2, 3, 3), 0.7);
        let half_ln_2pi = 0.918_938_533_204_672_8;
        assert!((nll_loss(&est(0.7, 1.0), target.view()).unwrap() - half_ln_2pi).abs() < 1e-12);
        assert!((nll_loss(&est(1.7, 1.0), target.view()).unwrap() - (half_ln_2pi + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn nll_grows_with_sigma_beyond_residual() {
        let target = Array3::from_elem((2, 3, 3), 0.0);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..40 {
            let sigma = 0.5 * 1.3f64.powi(k);
            let l = nll_loss(&est(0.5, sigma), target.view()).unwrap();
            assert!(l > prev);
            prev = l;
        }
        assert!(prev > 5.0);
    }

    #[test]
    fn nll_minimizers() {
        let target = Array3::from_elem((2, 3, 3), 0.3);
        let at = |mu: f64, s: f64| nll_loss(&est(mu, s), target.view()).unwrap();
        for d in [-0.1, -0.01, 0.01, 0.1] {
            assert!(at(0.3, 0.8) < at(0.3 + d, 0.8));
        }
        let r = 0.45;
        let grid: Vec<f64> = (1..2000).map(|i| i as f64 * 0.001).collect();
        let best = grid.iter().copied().min_by(|a, b| at(0.3 + r, *a).total_cmp(&at(0.3 + r, *b))).unwrap();
        assert!((best - r).abs() <= 0.001 + 1e-12, "argmin {best}");
    }

    #[test]
    fn nll_rejects_nonpositive_sigma() {
        let bad = DistributionEstimate { mu: Array3::zeros((2, 1, 1)), sigma: Array3::zeros((2, 1, 1)) };
        assert!(matches!(nll_loss(&bad, Array3::zeros((2, 1, 1)).view()), Err(Error::Domain(_))));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let lr = 1e-3;
        let hp = AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        for g in [1e-2, -0.5, 3.0, -250.0] {
            let mut p = vec![Array2::from_elem((1, 1), 0.25)];
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[Array2::from_elem((1, 1), g)], &mut st, hp).unwrap();
            let delta = p[0][[0, 0]] - 0.25;
            assert!((delta + lr * g.signum()).abs() < lr * 1e-6, "g={g}: {delta}");
            assert!(delta.abs() <= lr * (1.0 + 1e-6));
        }
    }

    #[test]
    fn adam_zero_gradient_and_symmetry() {
        let hp = AdamHyper { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = vec![Array2::from_elem((1, 2), 1.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Array2::from_elem((1, 2), 0.3)], &mut st, hp).unwrap();
        assert_eq!(p[0][[0, 0]], p[0][[0, 1]]);
        let m_before = st.m[0].clone();
        adam_step(&mut p, &[Array2::zeros((1, 2))], &mut st, hp).unwrap();
        // zero gradient: moments decay and the parameter still moves along m
        assert!(st.m[0][[0, 0]].abs() < m_before[[0, 0]].abs());
        assert_eq!(p[0][[0, 0]], p[0][[0, 1]]);
        let mut fresh = vec![Array2::from_elem((1, 2), 1.0)];
        let mut st2 = AdamState::new(&fresh);
        adam_step(&mut fresh, &[Array2::zeros((1, 2))], &mut st2, hp).unwrap();
        assert_eq!(fresh[0], Array2::from_elem((1, 2), 1.0));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let hp = AdamHyper { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = vec![Array2::from_elem((1, 2), 1.0)];
        let mut st = AdamState::new(&p);
        let mut g = Array2::zeros((1, 2));
        g[[0, 1]] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &[g], &mut st, hp), Err(Error::Numeric(_))));
        assert_eq!(st.step, 0);
        assert_eq!(p[0], Array2::from_elem((1, 2), 1.0));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        for e in 1..=50 {
            let want = if e <= 25 { 1e-4 } else { 1e-5 };
            assert_eq!(cfg.lr_for_epoch(e), want);
        }
    }

    fn toy_corpus(n: usize, frames: usize) -> Corpus {
        let seqs = (0..n)
            .map(|i| Array::from_shape_fn((frames, 2, 16, 16), |(t, c, a, b)| -2.0 + 0.01 * (i + t + c + a * b) as f64))
            .collect();
        Corpus::new(seqs).unwrap()
    }

    #[test]
    fn sampling_is_seeded_and_consistent() {
        let corpus = toy_corpus(20, 11);
        let cfg = TrainConfig { batch_size: 6, ..Default::default() };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let a = sample_batch(&corpus, &mut r1, &cfg).unwrap();
            let b = sample_batch(&corpus, &mut r2, &cfg).unwrap();
            assert_eq!(a.provenance, b.provenance);
            for (p, (w, t)) in a.provenance.iter().zip(a.windows.iter().zip(&a.targets)) {
                assert!((2..=10).contains(&p.window_len));
                assert_eq!(w.dim().0, p.window_len);
                assert_eq!(p.target_index, p.window_len);
                let src = &corpus.sequences()[p.sequence];
                assert_eq!(t.view(), src.slice(s![p.target_index, .., .., ..]));
            }
        }
        let short = toy_corpus(4, 6);
        assert!(matches!(sample_batch(&short, &mut r1, &cfg), Err(Error::Contract(_))));
    }

    /// Linear forecaster with fixed sigma: the loss is quadratic in the weights.
    #[test]
    fn gradient_check_on_linear_toy() {
        use crate::autograd::Graph;
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((5, 2), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let mut params = vec![Array2::from_shape_fn((3, 2), |(i, j)| 0.1 * (i as f64 - j as f64)), Array2::from_elem((1, 2), 0.05)];
        let sigma = Array2::from_elem((5, 2), 0.7);
        let eval = |p: &[Array2<f64>], grad: bool| {
            let mut g = Graph::new(p);
            let xi = g.input(x.clone());
            let mu = g.linear(xi, 0, 1);
            let s = g.input(sigma.clone());
            let loss = g.gaussian_nll(mu, s, target.clone());
            (g.value(loss)[[0, 0]], grad.then(|| g.backward(loss)))
        };
        let analytic = eval(&params, true).1.unwrap();
        let probes: Vec<(usize, usize)> = (0..6).map(|k| (0, k)).chain([(1, 0), (1, 1)]).collect();
        let err = check_gradients(&mut params, &analytic, &probes, |p| eval(p, false).0);
        assert!(err < 1e-7, "linear toy error {err}");

        let mut corrupted = analytic.clone();
        corrupted[0][[1, 1]] *= 2.0;
        let err = check_gradients(&mut params, &corrupted, &probes, |p| eval(p, false).0);
        assert!(err > 0.3, "corrupted gradient not caught: {err}");
    }

    #[test]
    fn small_transformer_gradient_check() {
        let cfg = ModelConfig { d_model: 16, num_heads: 2, num_layers: 2, ff_dim: 24, head_hidden: 20, ..ModelConfig::transformer() };
        let model = Model::new(cfg, 3).unwrap();
        let (window, target) = probe_inputs(&model, 4, 1).unwrap();
        let err = gradient_check(&model, window.view(), target.view(), 60, 9).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn small_gru_gradient_check() {
        let cfg = ModelConfig { d_model: 12, num_layers: 2, head_hidden: 16, ..ModelConfig::gru() };
        let model = Model::new(cfg, 4).unwrap();
        let (window, target) = probe_inputs(&model, 6, 2).unwrap();
        let err = gradient_check(&model, window.view(), target.view(), 60, 10).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn chunked_gradients_match_whole_batch() {
        let cfg = ModelConfig { d_model: 16, num_heads: 2, num_layers: 1, ff_dim: 24, head_hidden: 20, dropout: 0.0, ..ModelConfig::transformer() };
        let model = Model::new(cfg, 3).unwrap();
        let corpus = toy_corpus(7, 11);
        let batch = assemble_batch(&corpus, &[0, 1, 2, 3, 4, 5, 6], 3).unwrap();
        let (l1, g1) = batch_loss_and_grad(&model, &batch, 7, Mode::Eval, 0).unwrap();
        let (l2, g2) = batch_loss_and_grad(&model, &batch, 3, Mode::Eval, 0).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_training_is_deterministic() {
        let cfg = ModelConfig { d_model: 16, num_heads: 2, num_layers: 1, ff_dim: 24, head_hidden: 20, ..ModelConfig::transformer() };
        let corpus = toy_corpus(12, 11);
        let tc = TrainConfig { batch_size: 4, epochs: 3, lr_initial: 1e-3, lr_after_decay: 1e-4, decay_epoch: 2, chunk_size: 3, ..Default::default() };
        let run = || train(Model::new(cfg.clone(), 1).unwrap(), &tc, &corpus, |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve.iter().map(|r| r.lr).collect::<Vec<_>>(), vec![1e-3, 1e-3, 1e-4]);
        assert!(loss_curve_csv(&a.curve).starts_with("epoch,mean_nll,lr\n1,"));
    }
}
