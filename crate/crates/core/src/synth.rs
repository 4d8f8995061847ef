//! Seeded synthetic SAR time series with ground-truth disturbance masks.
//!
//! Each scene is a Voronoi land-cover mosaic. Every frame multiplies the
//! class backscatter by an optional seasonal factor and by unit-mean
//! `Gamma(L, 1/L)` speckle. The final frame is additionally scaled by
//! `10^(delta_db/10)` inside a random mask made of at most five blobs.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::{default_pol_names, read_rts, write_rts, RasterStack, NUM_POLS};

/// Frames are clipped to `[CLIP_EPS, 1 - CLIP_EPS]`.
pub const CLIP_EPS: f64 = 1e-4;
/// Side length of training-corpus sequences.
pub const CORPUS_TILE: usize = 16;
pub const MAX_COMPONENTS: usize = 5;
const REVISIT_DAYS: i64 = 12;
const SEASON_PERIOD_STEPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Total frames, baseline plus the final acquisition.
    pub num_steps: usize,
    pub num_classes: usize,
    /// Equivalent number of looks of the speckle.
    pub looks: f64,
    /// Mean backscatter per class, `[VV, VH]`.
    pub class_gamma0: Vec<[f64; 2]>,
    pub disturbance_fraction: f64,
    pub disturbance_delta_db: f64,
    pub seasonal_amplitude_db: f64,
    /// Mean area of one Voronoi cell, in pixels.
    pub region_area: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: CORPUS_TILE,
            width: CORPUS_TILE,
            num_steps: 11,
            num_classes: 4,
            looks: 9.0,
            class_gamma0: vec![[0.015, 0.003], [0.06, 0.012], [0.12, 0.03], [0.22, 0.06]],
            disturbance_fraction: 0.05,
            disturbance_delta_db: -6.0,
            seasonal_amplitude_db: 0.0,
            region_area: 96.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The 128x128 evaluation scene used by the benchmark.
    pub fn benchmark_scene(seed: u64) -> Self {
        Self { height: 128, width: 128, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            bail!(Validation, "empty scene {}x{}", self.height, self.width);
        }
        if self.num_steps < 3 {
            bail!(Validation, "num_steps must be at least 3, got {}", self.num_steps);
        }
        if self.num_classes == 0 || self.class_gamma0.len() < self.num_classes {
            bail!(
                Validation,
                "{} classes requested but {} gamma0 rows given",
                self.num_classes,
                self.class_gamma0.len()
            );
        }
        if let Some(g) = self.class_gamma0.iter().flatten().find(|g| !(**g > 0.0 && **g < 1.0)) {
            bail!(Validation, "class gamma0 {g} outside (0, 1)");
        }
        if !(self.looks >= 1.0) {
            bail!(Validation, "looks must be >= 1, got {}", self.looks);
        }
        if !(0.0..=1.0).contains(&self.disturbance_fraction) {
            bail!(Validation, "disturbance_fraction {} outside [0, 1]", self.disturbance_fraction);
        }
        if !(self.seasonal_amplitude_db >= 0.0) || !self.disturbance_delta_db.is_finite() {
            bail!(Validation, "invalid seasonal amplitude or disturbance delta");
        }
        if !(self.region_area > 0.0) {
            bail!(Validation, "region_area must be positive");
        }
        Ok(())
    }
}

/// Acquisition dates on a fixed 12-day revisit starting 2021-01-01.
pub fn timestamps(n: usize) -> Vec<String> {
    let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    (0..n)
        .map(|i| (start + Duration::days(REVISIT_DAYS * i as i64)).format("%Y-%m-%d").to_string())
        .collect()
}

/// One splitmix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds for corpus entries: the first `count` splitmix64 outputs of the
/// master seed.
pub fn derive_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut state = master;
    (0..count).map(|_| splitmix64(&mut state)).collect()
}

fn voronoi_classes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array2<usize> {
    let (h, w) = (cfg.height, cfg.width);
    let n_sites = ((h * w) as f64 / cfg.region_area).round().max(1.0) as usize;
    let sites: Vec<(f64, f64, usize)> = (0..n_sites)
        .map(|_| {
            let r = rng.random::<f64>() * h as f64;
            let c = rng.random::<f64>() * w as f64;
            (r, c, rng.random_range(0..cfg.num_classes))
        })
        .collect();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (pi, pj) = (i as f64 + 0.5, j as f64 + 0.5);
        let mut best = (f64::INFINITY, 0);
        for &(r, c, class) in &sites {
            let d = (r - pi).powi(2) + (c - pj).powi(2);
            if d < best.0 {
                best = (d, class);
            }
        }
        best.1
    })
}

/// Grows up to three 4-connected blobs by random frontier accretion until
/// about `fraction` of the pixels are covered.
fn disturbance_mask(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let (h, w) = (cfg.height, cfg.width);
    let mut mask = Array2::from_elem((h, w), false);
    let target = (cfg.disturbance_fraction * (h * w) as f64).round() as usize;
    if target == 0 {
        return mask;
    }
    let blobs = rng.random_range(1..=3usize).min(target);
    let mut covered = 0;
    for b in 0..blobs {
        let quota = target / blobs + usize::from(b < target % blobs);
        let seed = (rng.random_range(0..h), rng.random_range(0..w));
        let mut frontier = vec![seed];
        let mut visited = Array2::from_elem((h, w), false);
        let mut grown = 0;
        while grown < quota && !frontier.is_empty() {
            let (i, j) = frontier.swap_remove(rng.random_range(0..frontier.len()));
            if visited[[i, j]] {
                continue;
            }
            visited[[i, j]] = true;
            // earlier blobs are passable but do not count toward the quota
            if !mask[[i, j]] {
                mask[[i, j]] = true;
                grown += 1;
            }
            if i > 0 {
                frontier.push((i - 1, j));
            }
            if i + 1 < h {
                frontier.push((i + 1, j));
            }
            if j > 0 {
                frontier.push((i, j - 1));
            }
            if j + 1 < w {
                frontier.push((i, j + 1));
            }
        }
        covered += grown;
    }
    debug_assert!(covered <= target);
    mask
}

/// Number of 4-connected components of `true` pixels.
pub fn count_components(mask: &Array2<bool>) -> usize {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut count = 0;
    for start in mask.indexed_iter().filter(|(_, &m)| m).map(|(ix, _)| ix) {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some((i, j)) = queue.pop_front() {
            let mut visit = |p: (usize, usize)| {
                if mask[p] && !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            };
            if i > 0 {
                visit((i - 1, j));
            }
            if i + 1 < h {
                visit((i + 1, j));
            }
            if j > 0 {
                visit((i, j - 1));
            }
            if j + 1 < w {
                visit((i, j + 1));
            }
        }
    }
    count
}

/// Generates a stack and its truth mask. Same config, same output bits.
pub fn generate(cfg: &SynthConfig) -> Result<(RasterStack, Array2<bool>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = voronoi_classes(cfg, &mut rng);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mask = disturbance_mask(cfg, &mut rng);
    let speckle = Gamma::new(cfg.looks, 1.0 / cfg.looks).expect("looks validated");
    let (t_total, h, w) = (cfg.num_steps, cfg.height, cfg.width);
    let shift = 10f64.powf(cfg.disturbance_delta_db / 10.0);
    let mut data = Array4::<f32>::zeros((t_total, NUM_POLS, h, w));
    for t in 0..t_total {
        let season_db = cfg.seasonal_amplitude_db
            * (std::f64::consts::TAU * t as f64 / SEASON_PERIOD_STEPS + phase).sin();
        let season = 10f64.powf(season_db / 10.0);
        let last = t + 1 == t_total;
        for c in 0..NUM_POLS {
            for i in 0..h {
                for j in 0..w {
                    let mut v = cfg.class_gamma0[classes[[i, j]]][c] * season * speckle.sample(&mut rng);
                    if last && mask[[i, j]] {
                        v *= shift;
                    }
                    data[[t, c, i, j]] = v.clamp(CLIP_EPS, 1.0 - CLIP_EPS) as f32;
                }
            }
        }
    }
    let stack = RasterStack::new(data, timestamps(t_total), default_pol_names())?;
    Ok((stack, mask))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub master_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl CorpusManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&crate::error::read_file(path)?)?)
    }

    pub fn resolve(&self, manifest_path: &Path) -> Vec<PathBuf> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.entries.iter().map(|e| base.join(&e.path)).collect()
    }

    pub fn load_stacks(&self, manifest_path: &Path) -> Result<Vec<RasterStack>> {
        self.resolve(manifest_path).iter().map(|p| read_rts(p)).collect()
    }
}

/// Nominal (undisturbed) `tile x tile` sequences for self-supervised training.
pub fn corpus_config(cfg: &SynthConfig, seed: u64, tile: usize) -> SynthConfig {
    SynthConfig {
        height: tile,
        width: tile,
        disturbance_fraction: 0.0,
        seed,
        ..cfg.clone()
    }
}

/// Generates `count` 16x16 sequences in memory; entry `i` uses the `i`th
/// derived seed.
pub fn generate_corpus_stacks(cfg: &SynthConfig, count: usize) -> Result<Vec<RasterStack>> {
    generate_corpus_tiles(cfg, count, CORPUS_TILE)
}

pub fn generate_corpus_tiles(cfg: &SynthConfig, count: usize, tile: usize) -> Result<Vec<RasterStack>> {
    if count == 0 {
        bail!(Validation, "corpus count must be at least 1");
    }
    derive_seeds(cfg.seed, count)
        .into_par_iter()
        .map(|seed| generate(&corpus_config(cfg, seed, tile)).map(|(s, _)| s))
        .collect()
}

/// Writes `count` sequences plus `manifest.json` into `out_dir`.
pub fn generate_training_corpus(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<CorpusManifest> {
    generate_training_corpus_tiles(cfg, count, CORPUS_TILE, out_dir)
}

pub fn generate_training_corpus_tiles(cfg: &SynthConfig, count: usize, tile: usize, out_dir: &Path) -> Result<CorpusManifest> {
    let stacks = generate_corpus_tiles(cfg, count, tile)?;
    fs::create_dir_all(out_dir)?;
    let seeds = derive_seeds(cfg.seed, count);
    let mut entries = Vec::with_capacity(count);
    for (i, (stack, seed)) in stacks.iter().zip(seeds).enumerate() {
        let name = format!("seq_{i:05}.rts");
        write_rts(stack, &out_dir.join(&name))?;
        entries.push(ManifestEntry { path: name, seed });
    }
    let manifest = CorpusManifest { master_seed: cfg.seed, entries };
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
