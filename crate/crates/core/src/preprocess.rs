//! Homomorphic total-variation despeckling and the logit transform.
//!
//! Despeckling works in decibels (`10 log10`); the logit uses natural logs.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::{RasterStack, ValueCheck};

/// Dual step size of the TV solver.
const TV_STEP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// TV regularization weight, in dB.
    pub tv_weight: f64,
    pub tv_iters: usize,
    pub clip_epsilon: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { tv_weight: 1.5, tv_iters: 50, clip_epsilon: 1e-4 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight > 0.0) {
            bail!(Validation, "tv_weight must be positive, got {}", self.tv_weight);
        }
        if self.tv_iters == 0 {
            bail!(Validation, "tv_iters must be at least 1");
        }
        check_eps(self.clip_epsilon)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        bail!(Validation, "clip epsilon {eps} outside (0, 0.5)");
    }
    Ok(())
}

pub fn logit(x: f64) -> f64 {
    x.ln() - (-x).ln_1p()
}

pub fn inverse_logit(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Element-wise logit of a stack. Values must lie strictly inside (0, 1).
pub fn logit_transform(stack: &RasterStack) -> Result<Array4<f64>> {
    logit_array(stack.data().mapv(f64::from))
}

pub fn logit_array(mut data: Array4<f64>) -> Result<Array4<f64>> {
    if let Some(v) = data.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        bail!(Domain, "logit undefined for {v}");
    }
    data.mapv_inplace(logit);
    Ok(data)
}

pub fn inverse_logit_array<D: ndarray::Dimension>(y: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    y.mapv(inverse_logit)
}

/// Clamps every value to `[eps, 1 - eps]`.
pub fn clip_open_interval(stack: &RasterStack, eps: f64) -> Result<RasterStack> {
    check_eps(eps)?;
    let data = clip_array(stack.data().view(), eps);
    stack.with_data(data, ValueCheck::OpenUnit)
}

/// Clamps into `[eps, 1 - eps]`; NaN passes through.
pub fn clip_array(data: ArrayView4<f32>, eps: f64) -> Array4<f32> {
    let lo = eps as f32;
    let hi = (1.0 - eps) as f32;
    data.mapv(|v| if v.is_nan() { v } else { v.clamp(lo, hi) })
}

/// `1/2 |u - y|^2 + weight * TV(u)` with anisotropic TV over 4-neighbour
/// differences.
pub fn tv_objective(u: ArrayView2<f64>, y: ArrayView2<f64>, weight: f64) -> f64 {
    let fidelity: f64 = u.iter().zip(y.iter()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
    let (h, w) = u.dim();
    let mut tv = 0.0;
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                tv += (u[[i, j + 1]] - u[[i, j]]).abs();
            }
            if i + 1 < h {
                tv += (u[[i + 1, j]] - u[[i, j]]).abs();
            }
        }
    }
    fidelity + weight * tv
}

/// ROF denoising by projected gradient on the dual. `px`/`py` live on the
/// horizontal/vertical pixel edges, so the boundary is handled by simply
/// having no edge past the last row or column (mirror symmetric).
pub fn tv_denoise(y: ArrayView2<f64>, weight: f64, iters: usize) -> Array2<f64> {
    let (h, w) = y.dim();
    let mut px = Array2::<f64>::zeros((h, w.saturating_sub(1)));
    let mut py = Array2::<f64>::zeros((h.saturating_sub(1), w));
    let mut u = y.to_owned();
    let step = TV_STEP / weight;
    let primal = |px: &Array2<f64>, py: &Array2<f64>, u: &mut Array2<f64>| {
        for i in 0..h {
            for j in 0..w {
                // D^T p at (i, j)
                let mut div = 0.0;
                if j + 1 < w {
                    div -= px[[i, j]];
                }
                if j > 0 {
                    div += px[[i, j - 1]];
                }
                if i + 1 < h {
                    div -= py[[i, j]];
                }
                if i > 0 {
                    div += py[[i - 1, j]];
                }
                u[[i, j]] = y[[i, j]] - weight * div;
            }
        }
    };
    for _ in 0..iters {
        for ((i, j), p) in px.indexed_iter_mut() {
            *p = (*p + step * (u[[i, j + 1]] - u[[i, j]])).clamp(-1.0, 1.0);
        }
        for ((i, j), p) in py.indexed_iter_mut() {
            *p = (*p + step * (u[[i + 1, j]] - u[[i, j]])).clamp(-1.0, 1.0);
        }
        primal(&px, &py, &mut u);
    }
    u
}

/// Denoises every frame and polarization independently in dB, then maps
/// back to backscatter and re-clips to `[eps, 1 - eps]`.
pub fn despeckle_tv(stack: &RasterStack, cfg: &PreprocessConfig) -> Result<RasterStack> {
    stack.with_data(despeckle_array(stack.data().view(), cfg)?, ValueCheck::OpenUnit)
}

/// [`despeckle_tv`] on a bare `(T, C, H, W)` array, any `T`.
pub fn despeckle_array(data: ArrayView4<f32>, cfg: &PreprocessConfig) -> Result<Array4<f32>> {
    cfg.validate()?;
    if let Some(v) = data.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        bail!(Domain, "cannot despeckle value {v}");
    }
    let (t, c, _, _) = data.dim();
    let planes: Vec<Array2<f64>> = (0..t * c)
        .into_par_iter()
        .map(|k| {
            let plane = data.index_axis(Axis(0), k / c);
            let plane = plane.index_axis(Axis(0), k % c);
            let db = plane.mapv(|v| 10.0 * f64::from(v).log10());
            let den = tv_denoise(db.view(), cfg.tv_weight, cfg.tv_iters);
            den.mapv(|v| 10f64.powf(v / 10.0))
        })
        .collect();
    let mut out = Array4::<f32>::zeros(data.raw_dim());
    for (k, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), k / c)
            .index_axis_mut(Axis(0), k % c)
            .assign(&plane.mapv(|v| v as f32));
    }
    Ok(clip_array(out.view(), cfg.clip_epsilon))
}

/// Optional despeckle, clip, logit: the model's input domain.
pub fn prepare_logit(stack: &RasterStack, cfg: &PreprocessConfig, despeckle: bool) -> Result<Array4<f64>> {
    let clipped = clip_open_interval(stack, cfg.clip_epsilon)?;
    let ready = if despeckle { despeckle_tv(&clipped, cfg)? } else { clipped };
    logit_transform(&ready)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::default_pol_names;
    use ndarray::{s, Array};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    fn stack_from(data: Array4<f32>) -> RasterStack {
        let t = data.dim().0;
        let ts = (0..t).map(|i| format!("2022-03-{:02}", i + 1)).collect();
        RasterStack::new(data, ts, default_pol_names()).unwrap()
    }

    fn speckled_plane(h: usize, w: usize, level: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(9.0, 1.0 / 9.0).unwrap();
        Array2::from_shape_simple_fn((h, w), || level * gamma.sample(&mut rng))
    }

    fn spatial_variance(a: ndarray::ArrayView2<f64>) -> f64 {
        let m = a.mean().unwrap();
        a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn logit_reference_values() {
        assert_eq!(logit(0.5), 0.0);
        assert!((logit(0.9) - 2.197_224_577_336_219_4).abs() < 1e-12);
        assert_eq!(inverse_logit(0.0), 0.5);
        assert!((inverse_logit(9f64.ln()) - 0.9).abs() < 1e-12);
        for x in [0.01, 0.3, 0.99] {
            assert!((inverse_logit(logit(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_rejects_boundary() {
        let data = Array4::from_elem((2, 2, 2, 2), 0.5f64);
        let mut bad = data.clone();
        bad[[0, 0, 0, 0]] = 1.0;
        assert!(logit_array(data).is_ok());
        assert!(matches!(logit_array(bad), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn clipping() {
        let mut raw = Array4::from_elem((2, 2, 1, 3), 0.5f32);
        raw[[0, 0, 0, 0]] = 0.0;
        raw[[0, 0, 0, 2]] = 1.0;
        let ts = vec!["2022-01-01".into(), "2022-01-13".into()];
        let stack = RasterStack::with_check(raw, ts, default_pol_names(), ValueCheck::Finite).unwrap();
        let out = clip_open_interval(&stack, 1e-4).unwrap();
        assert_eq!(out.data()[[0, 0, 0, 0]], 1e-4f32);
        assert_eq!(out.data()[[0, 0, 0, 1]], 0.5);
        assert_eq!(out.data()[[0, 0, 0, 2]], (1.0 - 1e-4) as f32);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let stack = stack_from(Array4::from_elem((2, 2, 12, 12), 0.123f32));
        let out = despeckle_tv(&stack, &PreprocessConfig::default()).unwrap();
        for (a, b) in out.data().iter().zip(stack.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(out.timestamps(), stack.timestamps());
    }

    #[test]
    fn speckle_variance_drops_by_four() {
        let plane = speckled_plane(64, 64, 0.1, 11);
        let mut data = Array4::<f32>::zeros((2, 2, 64, 64));
        for t in 0..2 {
            for c in 0..2 {
                data.slice_mut(s![t, c, .., ..]).assign(&plane.mapv(|v| v as f32));
            }
        }
        let stack = stack_from(data);
        let out = despeckle_tv(&stack, &PreprocessConfig::default()).unwrap();
        let before = spatial_variance(plane.view());
        let after = spatial_variance(out.data().slice(s![0, 0, .., ..]).mapv(f64::from).view());
        assert!(after < 0.25 * before, "variance {before} -> {after}");
    }

    #[test]
    fn objective_does_not_increase() {
        for seed in 0..6 {
            let y = speckled_plane(20, 17, 0.05 + 0.03 * seed as f64, seed).mapv(|v| 10.0 * v.log10());
            for weight in [0.5, 1.5, 4.0] {
                let u = tv_denoise(y.view(), weight, 50);
                assert!(tv_objective(u.view(), y.view(), weight) <= tv_objective(y.view(), y.view(), weight));
            }
        }
    }

    #[test]
    fn mirror_equivariance() {
        let y = speckled_plane(16, 23, 0.2, 5).mapv(|v| 10.0 * v.log10());
        let flipped = y.slice(s![.., ..;-1]).to_owned();
        let a = tv_denoise(flipped.view(), 1.5, 50);
        let b = tv_denoise(y.view(), 1.5, 50);
        let b = b.slice(s![.., ..;-1]);
        for (x, z) in a.iter().zip(b.iter()) {
            assert!((x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn despeckle_rejects_nonpositive() {
        let mut data = Array::from_elem((2, 2, 3, 3), 0.2f32);
        data[[1, 1, 1, 1]] = 0.0;
        let ts = vec!["2022-01-01".into(), "2022-01-13".into()];
        let raw = RasterStack::with_check(data, ts, default_pol_names(), ValueCheck::Finite).unwrap();
        assert!(matches!(despeckle_tv(&raw, &PreprocessConfig::default()), Err(crate::Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn logit_roundtrip(y in -30.0f64..30.0) {
            let x = inverse_logit(y);
            // Near x = 1 the f64 grid itself limits how well 1 - x is known:
            // one ulp of x moves logit(x) by ulp / (1 - x).
            let representable = f64::EPSILON / (1.0 - x);
            prop_assert!((logit(x) - y).abs() < 1e-12 + 2.0 * representable);
        }

        #[test]
        fn logit_roundtrip_nonpositive(y in -30.0f64..=0.0) {
            prop_assert!((logit(inverse_logit(y)) - y).abs() < 1e-12);
        }

        #[test]
        fn inverse_logit_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assume!(a < b);
            prop_assert!(inverse_logit(a) <= inverse_logit(b));
        }
    }
}
