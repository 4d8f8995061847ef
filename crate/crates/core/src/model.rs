//! Forecasting networks: a patchified spatiotemporal transformer encoder and a
//! stacked-GRU baseline. Both map `T x C x S x S` logit windows to a per-pixel
//! Gaussian (mean and standard deviation) for the next acquisition.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{bail, Error, Result};
use crate::raster::{DistributionEstimate, NUM_POLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_size: usize,
    /// Transformer only.
    pub patch_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Transformer only.
    pub ff_dim: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub max_t: usize,
    pub sigma_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::transformer()
    }
}

impl ModelConfig {
    /// 256-wide, 4 heads, 4 layers, feed-forward 768: about 3.3M weights.
    pub fn transformer() -> Self {
        Self {
            kind: ModelKind::Transformer,
            input_size: 16,
            patch_size: 8,
            d_model: 256,
            num_heads: 4,
            num_layers: 4,
            ff_dim: 768,
            head_hidden: 768,
            dropout: 0.2,
            max_t: 10,
            sigma_floor: 1e-3,
        }
    }

    /// 326-wide, 4 layers, head hidden 978, 8x8 input: parameter-matched.
    pub fn gru() -> Self {
        Self {
            kind: ModelKind::Gru,
            input_size: 8,
            patch_size: 8,
            d_model: 326,
            num_heads: 4,
            num_layers: 4,
            ff_dim: 768,
            head_hidden: 978,
            dropout: 0.2,
            max_t: 10,
            sigma_floor: 1e-3,
        }
    }

    /// Transformer with a given feed-forward width and depth. The projection
    /// heads use the same hidden width as the feed-forward layers.
    pub fn transformer_sized(ff_dim: usize, num_layers: usize) -> Self {
        Self { ff_dim, head_hidden: ff_dim, num_layers, ..Self::transformer() }
    }

    /// Transformer with a given input window and patch size.
    pub fn transformer_windowed(input_size: usize, patch_size: usize) -> Self {
        Self { input_size, patch_size, ..Self::transformer() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.d_model == 0 || self.num_layers == 0 || self.head_hidden == 0 {
            bail!(Validation, "model dimensions must be positive");
        }
        if self.kind == ModelKind::Transformer {
            if self.patch_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
                bail!(
                    Validation,
                    "input size {} not divisible by patch size {}",
                    self.input_size,
                    self.patch_size
                );
            }
            if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
                bail!(Validation, "d_model {} not divisible by {} heads", self.d_model, self.num_heads);
            }
            if self.ff_dim == 0 {
                bail!(Validation, "ff_dim must be positive");
            }
        }
        if self.max_t < 2 {
            bail!(Validation, "max_t must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Validation, "dropout {} outside [0, 1)", self.dropout);
        }
        if !(self.sigma_floor > 0.0) {
            bail!(Validation, "sigma_floor must be positive");
        }
        Ok(())
    }

    /// Side of the square block each head output row covers.
    pub fn readout_size(&self) -> usize {
        match self.kind {
            ModelKind::Transformer => self.patch_size,
            ModelKind::Gru => self.input_size,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.input_size / self.readout_size()
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    fn readout_dim(&self) -> usize {
        NUM_POLS * self.readout_size().pow(2)
    }
}

/// Exact number of scalar weights for `cfg`.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    Layout::build(cfg).shapes.iter().map(|(_, (r, c), _)| r * c).sum()
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    Uniform(usize),
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1: (usize, usize),
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
    ln2: (usize, usize),
    ff1: LinearIdx,
    ff2: LinearIdx,
}

#[derive(Debug, Clone)]
struct GruLayerIdx {
    ir: LinearIdx,
    iz: LinearIdx,
    in_: LinearIdx,
    hr: LinearIdx,
    hz: LinearIdx,
    hn: LinearIdx,
}

#[derive(Debug, Clone)]
struct HeadIdx {
    l1: LinearIdx,
    l2: LinearIdx,
}

#[derive(Debug, Clone)]
enum Trunk {
    Transformer {
        embed: LinearIdx,
        spatial: usize,
        temporal: usize,
        blocks: Vec<BlockIdx>,
    },
    Gru {
        layers: Vec<GruLayerIdx>,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    shapes: Vec<(String, (usize, usize), Init)>,
    trunk: Trunk,
    mu_head: HeadIdx,
    sigma_head: HeadIdx,
}

impl Layout {
    fn build(cfg: &ModelConfig) -> Self {
        let mut shapes: Vec<(String, (usize, usize), Init)> = Vec::new();
        let mut push = |name: String, shape: (usize, usize), init: Init| {
            shapes.push((name, shape, init));
            shapes.len() - 1
        };
        let linear = |push: &mut dyn FnMut(String, (usize, usize), Init) -> usize,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize| LinearIdx {
            w: push(format!("{name}.weight"), (fan_in, fan_out), Init::Uniform(fan_in)),
            b: push(format!("{name}.bias"), (1, fan_out), Init::Uniform(fan_in)),
        };
        let d = cfg.d_model;
        let trunk = match cfg.kind {
            ModelKind::Transformer => {
                let embed = linear(&mut push, "patch_embed", cfg.readout_dim(), d);
                let spatial = push("spatial_embed".into(), (cfg.num_patches(), d), Init::Normal(0.02));
                let temporal = push("temporal_embed".into(), (cfg.max_t, d), Init::Normal(0.02));
                let mut blocks = Vec::new();
                for l in 0..cfg.num_layers {
                    let ln = |push: &mut dyn FnMut(String, (usize, usize), Init) -> usize, n: &str| {
                        (
                            push(format!("blocks.{l}.{n}.gain"), (1, d), Init::Const(1.0)),
                            push(format!("blocks.{l}.{n}.bias"), (1, d), Init::Const(0.0)),
                        )
                    };
                    let ln1 = ln(&mut push, "ln1");
                    let q = linear(&mut push, &format!("blocks.{l}.attn.q"), d, d);
                    let k = linear(&mut push, &format!("blocks.{l}.attn.k"), d, d);
                    let v = linear(&mut push, &format!("blocks.{l}.attn.v"), d, d);
                    let o = linear(&mut push, &format!("blocks.{l}.attn.out"), d, d);
                    let ln2 = ln(&mut push, "ln2");
                    let ff1 = linear(&mut push, &format!("blocks.{l}.ff1"), d, cfg.ff_dim);
                    let ff2 = linear(&mut push, &format!("blocks.{l}.ff2"), cfg.ff_dim, d);
                    blocks.push(BlockIdx { ln1, q, k, v, o, ln2, ff1, ff2 });
                }
                Trunk::Transformer { embed, spatial, temporal, blocks }
            }
            ModelKind::Gru => {
                let mut layers = Vec::new();
                for l in 0..cfg.num_layers {
                    let input = if l == 0 { cfg.readout_dim() } else { d };
                    // PyTorch-style gate init: everything uniform in +-1/sqrt(hidden)
                    let gate = |push: &mut dyn FnMut(String, (usize, usize), Init) -> usize,
                                    n: &str,
                                    fan_in: usize| LinearIdx {
                        w: push(format!("gru.{l}.{n}.weight"), (fan_in, d), Init::Uniform(d)),
                        b: push(format!("gru.{l}.{n}.bias"), (1, d), Init::Uniform(d)),
                    };
                    let ir = gate(&mut push, "ir", input);
                    let iz = gate(&mut push, "iz", input);
                    let in_ = gate(&mut push, "in", input);
                    let hr = gate(&mut push, "hr", d);
                    let hz = gate(&mut push, "hz", d);
                    let hn = gate(&mut push, "hn", d);
                    layers.push(GruLayerIdx { ir, iz, in_, hr, hz, hn });
                }
                Trunk::Gru { layers }
            }
        };
        let mu_head = HeadIdx {
            l1: linear(&mut push, "mu_head.0", d, cfg.head_hidden),
            l2: linear(&mut push, "mu_head.1", cfg.head_hidden, cfg.readout_dim()),
        };
        let sigma_head = HeadIdx {
            l1: linear(&mut push, "sigma_head.0", d, cfg.head_hidden),
            l2: linear(&mut push, "sigma_head.1", cfg.head_hidden, cfg.readout_dim()),
        };
        Self { shapes, trunk, mu_head, sigma_head }
    }
}

/// Output of [`Model::patchify`]: embedded tokens plus their grid coordinates.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    /// `(patch_row, patch_col)` per token.
    pub spatial_index: Vec<(usize, usize)>,
    pub temporal_index: Vec<usize>,
}

/// Splits a `T x C x S x S` window into `T * (S/P)^2` rows of `C*P*P` values,
/// ordered by time, then patch row, then patch column.
pub fn extract_patches(window: ArrayView4<f64>, patch: usize) -> Array2<f64> {
    let (t, c, s_, _) = window.dim();
    let np = s_ / patch;
    let mut out = Array2::zeros((t * np * np, c * patch * patch));
    for ti in 0..t {
        for pr in 0..np {
            for pc in 0..np {
                let row = (ti * np + pr) * np + pc;
                let block = window.slice(s![ti, .., pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch]);
                for (dst, src) in out.row_mut(row).iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    out
}

/// Inverse of [`extract_patches`].
pub fn reassemble_patches(rows: ArrayView2<f64>, steps: usize, channels: usize, size: usize, patch: usize) -> Array4<f64> {
    let np = size / patch;
    let mut out = Array4::zeros((steps, channels, size, size));
    for ti in 0..steps {
        for pr in 0..np {
            for pc in 0..np {
                let row = rows.row((ti * np + pr) * np + pc);
                let mut block = out.slice_mut(s![ti, .., pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch]);
                for (dst, src) in block.iter_mut().zip(row.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    out
}

/// Flattens one `C x S x S` target into the head-output row layout.
fn target_rows(target: ArrayView3<f64>, patch: usize) -> Array2<f64> {
    extract_patches(target.insert_axis(ndarray::Axis(0)), patch)
}

/// A forecasting network together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
}

impl Model {
    /// Fresh weights: linear layers uniform in `+-1/sqrt(fan_in)`, embeddings
    /// normal with std 0.02, layer norms at identity.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.shapes.len());
        let mut params = Vec::with_capacity(layout.shapes.len());
        for (name, shape, init) in layout.shapes {
            let p = match init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                    Array2::from_shape_simple_fn(shape, || dist.sample(&mut rng))
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).unwrap();
                    Array2::from_shape_simple_fn(shape, || dist.sample(&mut rng))
                }
                Init::Const(v) => Array2::from_elem(shape, v),
            };
            names.push(name);
            params.push(p);
        }
        Ok(Self { cfg, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn layout(&self) -> Layout {
        Layout::build(&self.cfg)
    }

    fn check_windows(&self, windows: &[ArrayView4<f64>]) -> Result<usize> {
        let Some(first) = windows.first() else { bail!(Contract, "empty batch") };
        let (t, c, h, w) = first.dim();
        if t < 2 {
            bail!(Contract, "need at least 2 baseline frames, got {t}");
        }
        if self.cfg.kind == ModelKind::Transformer && t > self.cfg.max_t {
            bail!(Contract, "{t} baseline frames exceed max_t {}", self.cfg.max_t);
        }
        if c != NUM_POLS || h != self.cfg.input_size || w != self.cfg.input_size {
            bail!(
                Shape,
                "window {:?} does not match model input {}x{}x{}",
                first.dim(),
                NUM_POLS,
                self.cfg.input_size,
                self.cfg.input_size
            );
        }
        if windows.iter().any(|win| win.dim() != first.dim()) {
            bail!(Shape, "all windows in a batch must share one shape");
        }
        Ok(t)
    }

    fn dropout<R: Rng>(&self, g: &mut Graph, x: NodeId, rng: &mut Option<&mut R>) -> NodeId {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = g.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { 0.0 } else { keep });
                g.dropout(x, mask)
            }
            _ => x,
        }
    }

    /// Records the forward pass. Returns `(mu, sigma)` nodes whose rows follow
    /// the [`extract_patches`] layout of each window's forecast.
    fn build_graph<R: Rng>(
        &self,
        g: &mut Graph,
        windows: &[ArrayView4<f64>],
        mut rng: Option<&mut R>,
    ) -> Result<(NodeId, NodeId)> {
        let steps = self.check_windows(windows)?;
        let cfg = &self.cfg;
        let layout = self.layout();
        g.set_softplus_floor(cfg.sigma_floor);
        let features = match &layout.trunk {
            Trunk::Transformer { embed, spatial, temporal, blocks } => {
                let np = cfg.num_patches();
                let group = steps * np;
                let mut rows = Array2::zeros((windows.len() * group, cfg.readout_dim()));
                for (b, win) in windows.iter().enumerate() {
                    rows.slice_mut(s![b * group..(b + 1) * group, ..])
                        .assign(&extract_patches(win.view(), cfg.patch_size));
                }
                let x = g.input(rows);
                let x = g.linear(x, embed.w, embed.b);
                let mut x = g.add_positional(x, *spatial, *temporal, steps, np);
                for blk in blocks {
                    let h = g.layer_norm(x, blk.ln1.0, blk.ln1.1);
                    let q = g.linear(h, blk.q.w, blk.q.b);
                    let k = g.linear(h, blk.k.w, blk.k.b);
                    let v = g.linear(h, blk.v.w, blk.v.b);
                    let a = g.attention(q, k, v, group, cfg.num_heads);
                    let a = g.linear(a, blk.o.w, blk.o.b);
                    let a = self.dropout(g, a, &mut rng);
                    x = g.add(x, a);
                    let h = g.layer_norm(x, blk.ln2.0, blk.ln2.1);
                    let f = g.linear(h, blk.ff1.w, blk.ff1.b);
                    let f = g.relu(f);
                    let f = self.dropout(g, f, &mut rng);
                    let f = g.linear(f, blk.ff2.w, blk.ff2.b);
                    let f = self.dropout(g, f, &mut rng);
                    x = g.add(x, f);
                }
                // latest time step's token for each patch position
                let latest: Vec<usize> = (0..windows.len())
                    .flat_map(|b| (0..np).map(move |p| b * group + (steps - 1) * np + p))
                    .collect();
                g.gather_rows(x, latest)
            }
            Trunk::Gru { layers } => {
                let frame_dim = cfg.readout_dim();
                let mut inputs: Vec<NodeId> = (0..steps)
                    .map(|t| {
                        let mut m = Array2::zeros((windows.len(), frame_dim));
                        for (b, win) in windows.iter().enumerate() {
                            for (dst, src) in m.row_mut(b).iter_mut().zip(win.slice(s![t, .., .., ..]).iter()) {
                                *dst = *src;
                            }
                        }
                        g.input(m)
                    })
                    .collect();
                for (l, layer) in layers.iter().enumerate() {
                    let mut h = g.input(Array2::zeros((windows.len(), cfg.d_model)));
                    let mut outputs = Vec::with_capacity(steps);
                    for &x in &inputs {
                        let xr = g.linear(x, layer.ir.w, layer.ir.b);
                        let hr = g.linear(h, layer.hr.w, layer.hr.b);
                        let r = g.add(xr, hr);
                        let r = g.sigmoid(r);
                        let xz = g.linear(x, layer.iz.w, layer.iz.b);
                        let hz = g.linear(h, layer.hz.w, layer.hz.b);
                        let z = g.add(xz, hz);
                        let z = g.sigmoid(z);
                        let xn = g.linear(x, layer.in_.w, layer.in_.b);
                        let hn = g.linear(h, layer.hn.w, layer.hn.b);
                        let rhn = g.mul(r, hn);
                        let n = g.add(xn, rhn);
                        let n = g.tanh(n);
                        let keep_new = g.one_minus(z);
                        let a = g.mul(keep_new, n);
                        let b = g.mul(z, h);
                        h = g.add(a, b);
                        outputs.push(h);
                    }
                    if l + 1 < layers.len() {
                        outputs = outputs.into_iter().map(|o| self.dropout(g, o, &mut rng)).collect();
                    }
                    inputs = outputs;
                }
                *inputs.last().unwrap()
            }
        };
        let head = |g: &mut Graph, idx: &HeadIdx| {
            let hdn = g.linear(features, idx.l1.w, idx.l1.b);
            let hdn = g.relu(hdn);
            g.linear(hdn, idx.l2.w, idx.l2.b)
        };
        let mu = head(g, &layout.mu_head);
        let raw = head(g, &layout.sigma_head);
        let sigma = g.softplus(raw);
        Ok((mu, sigma))
    }

    fn unpack(&self, g: &Graph, mu: NodeId, sigma: NodeId, batch: usize) -> Result<Vec<DistributionEstimate>> {
        let cfg = &self.cfg;
        let np = cfg.num_patches();
        let (mv, sv) = (g.value(mu), g.value(sigma));
        (0..batch)
            .map(|b| {
                let rows = s![b * np..(b + 1) * np, ..];
                let assemble = |v: ArrayView2<f64>| {
                    reassemble_patches(v, 1, NUM_POLS, cfg.input_size, cfg.readout_size())
                        .index_axis_move(ndarray::Axis(0), 0)
                };
                let est = DistributionEstimate::new(assemble(mv.slice(rows)), assemble(sv.slice(rows)))?;
                Ok(est)
            })
            .collect()
    }

    /// Forecasts the next acquisition for each window. `dropout_rng` is only
    /// consulted in [`Mode::Train`].
    pub fn forward_batch<R: Rng>(
        &self,
        windows: &[ArrayView4<f64>],
        mode: Mode,
        dropout_rng: Option<&mut R>,
    ) -> Result<Vec<DistributionEstimate>> {
        let mut g = Graph::new(&self.params);
        let rng = if mode == Mode::Train { dropout_rng } else { None };
        let (mu, sigma) = self.build_graph(&mut g, windows, rng)?;
        self.unpack(&g, mu, sigma, windows.len())
    }

    /// Eval-mode forecast for one window.
    pub fn forward(&self, window: ArrayView4<f64>) -> Result<DistributionEstimate> {
        let mut out = self.forward_batch::<ChaCha8Rng>(&[window], Mode::Eval, None)?;
        Ok(out.pop().unwrap())
    }

    /// Mean NLL over the batch and its gradient with respect to every weight.
    pub fn loss_and_grad<R: Rng>(
        &self,
        windows: &[ArrayView4<f64>],
        targets: &[ArrayView3<f64>],
        mode: Mode,
        dropout_rng: Option<&mut R>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let (loss, grads) = self.loss_inner(windows, targets, mode, dropout_rng, true)?;
        Ok((loss, grads.unwrap()))
    }

    /// Mean NLL without the backward pass.
    pub fn loss<R: Rng>(
        &self,
        windows: &[ArrayView4<f64>],
        targets: &[ArrayView3<f64>],
        mode: Mode,
        dropout_rng: Option<&mut R>,
    ) -> Result<f64> {
        Ok(self.loss_inner(windows, targets, mode, dropout_rng, false)?.0)
    }

    fn loss_inner<R: Rng>(
        &self,
        windows: &[ArrayView4<f64>],
        targets: &[ArrayView3<f64>],
        mode: Mode,
        dropout_rng: Option<&mut R>,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<Array2<f64>>>)> {
        if windows.len() != targets.len() {
            bail!(Shape, "{} windows but {} targets", windows.len(), targets.len());
        }
        let cfg = &self.cfg;
        let want = (NUM_POLS, cfg.input_size, cfg.input_size);
        if let Some(t) = targets.iter().find(|t| t.dim() != want) {
            bail!(Shape, "target {:?} does not match {:?}", t.dim(), want);
        }
        let np = cfg.num_patches();
        let mut target = Array2::zeros((targets.len() * np, cfg.readout_dim()));
        for (b, t) in targets.iter().enumerate() {
            target
                .slice_mut(s![b * np..(b + 1) * np, ..])
                .assign(&target_rows(t.view(), cfg.readout_size()));
        }
        let mut g = Graph::new(&self.params);
        let rng = if mode == Mode::Train { dropout_rng } else { None };
        let (mu, sigma) = self.build_graph(&mut g, windows, rng)?;
        let loss = g.gaussian_nll(mu, sigma, target);
        let value = g.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        Ok((value, with_grad.then(|| g.backward(loss))))
    }

    /// Embeds a window into transformer tokens (patch projection plus learned
    /// spatial and temporal embeddings).
    pub fn patchify(&self, window: ArrayView4<f64>) -> Result<TokenSequence> {
        let Trunk::Transformer { embed, spatial, temporal, .. } = self.layout().trunk else {
            bail!(Contract, "patchify applies to transformer models only");
        };
        let steps = self.check_windows(&[window])?;
        let cfg = &self.cfg;
        let np_side = cfg.patches_per_side();
        let np = cfg.num_patches();
        let mut g = Graph::new(&self.params);
        let x = g.input(extract_patches(window, cfg.patch_size));
        let x = g.linear(x, embed.w, embed.b);
        let x = g.add_positional(x, spatial, temporal, steps, np);
        let tokens = g.value(x).to_owned();
        let spatial_index = (0..steps * np).map(|r| ((r % np) / np_side, r % np_side)).collect();
        let temporal_index = (0..steps * np).map(|r| r / np).collect();
        Ok(TokenSequence { tokens, spatial_index, temporal_index })
    }

    /// Writes `model.json`, `weights.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        let mut bytes = Vec::with_capacity(self.num_parameters() * 4);
        let mut index = Vec::with_capacity(self.params.len());
        for (name, p) in self.names.iter().zip(&self.params) {
            index.push(TensorEntry { name: name.clone(), shape: [p.nrows(), p.ncols()], offset: bytes.len() });
            for v in p.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let idx = WeightIndex { dtype: "f32le".into(), tensors: index };
        fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&idx)?)?;
        fs::write(dir.join("weights.bin"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_slice(&crate::error::read_file(&dir.join("model.json"))?)?;
        let idx: WeightIndex = serde_json::from_slice(&crate::error::read_file(&dir.join("weights.json"))?)?;
        let bytes = crate::error::read_file(&dir.join("weights.bin"))?;
        let mut model = Model::new(cfg, 0)?;
        if idx.dtype != "f32le" || idx.tensors.len() != model.params.len() {
            bail!(Format, "checkpoint index does not match model layout");
        }
        for (entry, (name, p)) in idx.tensors.iter().zip(model.names.iter().zip(model.params.iter_mut())) {
            if &entry.name != name || entry.shape != [p.nrows(), p.ncols()] {
                bail!(Format, "checkpoint tensor {} does not match {name}", entry.name);
            }
            let end = entry.offset + 4 * p.len();
            let raw = bytes
                .get(entry.offset..end)
                .ok_or_else(|| Error::Format(format!("tensor {name} truncated")))?;
            for (dst, c) in p.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightIndex {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn random_window(t: usize, s_: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((t, 2, s_, s_), || rng.random_range(-4.0..0.0))
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { d_model: 32, num_heads: 4, num_layers: 2, ff_dim: 48, head_hidden: 40, ..ModelConfig::transformer() }
    }

    #[test]
    fn default_parameter_counts() {
        let tf = parameter_count(&ModelConfig::transformer());
        let gru = parameter_count(&ModelConfig::gru());
        assert!((tf as f64 / 3.3e6 - 1.0).abs() < 0.05, "transformer {tf}");
        assert!((gru as f64 / 3.3e6 - 1.0).abs() < 0.05, "gru {gru}");
        let small = parameter_count(&ModelConfig::transformer_sized(512, 2));
        let large = parameter_count(&ModelConfig::transformer_sized(1024, 8));
        assert!((small as f64 / 1.5e6 - 1.0).abs() < 0.10, "small {small}");
        assert!((large as f64 / 7.1e6 - 1.0).abs() < 0.10, "large {large}");
    }

    /// Closed-form count: embedding, positions, pre-norm blocks, two heads.
    fn transformer_formula(d: usize, ff: usize, layers: usize, hh: usize) -> usize {
        let (patch_in, patches, max_t, out) = (2 * 8 * 8, 4, 10, 2 * 8 * 8);
        let embed = patch_in * d + d + patches * d + max_t * d;
        let block = 4 * d + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d);
        let heads = 2 * (d * hh + hh + hh * out + out);
        embed + layers * block + heads
    }

    #[test]
    fn exact_parameter_counts() {
        assert_eq!(parameter_count(&ModelConfig::transformer()), transformer_formula(256, 768, 4, 768));
        assert_eq!(parameter_count(&ModelConfig::transformer()), 3_261_952);
        assert_eq!(parameter_count(&ModelConfig::transformer_sized(512, 2)), transformer_formula(256, 512, 2, 512));
        assert_eq!(parameter_count(&ModelConfig::transformer_sized(1024, 8)), transformer_formula(256, 1024, 8, 1024));
        // two-bias GRU gates, first layer fed the flattened 2x8x8 frame
        let gru = |d: usize, input: usize| 3 * (input * d + d * d + 2 * d);
        let gru_total = gru(326, 128) + 3 * gru(326, 326) + 2 * (326 * 978 + 978 + 978 * 128 + 128);
        assert_eq!(parameter_count(&ModelConfig::gru()), gru_total);
        assert_eq!(gru_total, 3_255_040);
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for cfg in [small_cfg(), ModelConfig { d_model: 20, num_layers: 2, head_hidden: 30, ..ModelConfig::gru() }] {
            let m = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.num_parameters(), parameter_count(&cfg));
        }
    }

    #[test]
    fn token_counts() {
        let m = Model::new(small_cfg(), 3).unwrap();
        assert_eq!(m.patchify(random_window(10, 16, 1).view()).unwrap().tokens.nrows(), 40);
        let seq = m.patchify(random_window(2, 16, 1).view()).unwrap();
        assert_eq!(seq.tokens.nrows(), 8);
        assert_eq!(seq.temporal_index, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(seq.spatial_index[3], (1, 1));
    }

    #[test]
    fn zero_patch_with_zero_projection_is_pure_embedding() {
        let mut m = Model::new(small_cfg(), 4).unwrap();
        for name in ["patch_embed.weight", "patch_embed.bias"] {
            let i = m.param_index(name).unwrap();
            m.params_mut()[i].fill(0.0);
        }
        let seq = m.patchify(Array4::zeros((3, 2, 16, 16)).view()).unwrap();
        let sp = &m.params()[m.param_index("spatial_embed").unwrap()];
        let tm = &m.params()[m.param_index("temporal_embed").unwrap()];
        for (r, row) in seq.tokens.rows().into_iter().enumerate() {
            let (pr, pc) = seq.spatial_index[r];
            let expect = &sp.row(pr * 2 + pc) + &tm.row(seq.temporal_index[r]);
            assert_eq!(row, expect);
        }
    }

    #[test]
    fn patch_reassembly_is_exact() {
        let w = random_window(4, 16, 9);
        let rows = extract_patches(w.view(), 8);
        assert_eq!(reassemble_patches(rows.view(), 4, 2, 16, 8), w);
    }

    #[test]
    fn output_shapes_floor_and_determinism() {
        let m = Model::new(small_cfg(), 5).unwrap();
        let w = random_window(10, 16, 2);
        let a = m.forward(w.view()).unwrap();
        let b = m.forward(w.view()).unwrap();
        assert_eq!(a.mu.dim(), (2, 16, 16));
        assert_eq!(a, b);
        assert!(a.sigma.iter().all(|&s| s >= 1e-3));
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let m = Model::new(small_cfg(), 5).unwrap();
        let w = random_window(4, 16, 2);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = m.forward_batch(&[w.view()], Mode::Eval, Some(&mut r1)).unwrap();
        let b = m.forward_batch(&[w.view()], Mode::Eval, Some(&mut r2)).unwrap();
        assert_eq!(a, b);
        let c = m.forward_batch(&[w.view()], Mode::Train, Some(&mut r1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn temporal_order_matters() {
        let m = Model::new(small_cfg(), 6).unwrap();
        let w = random_window(5, 16, 3);
        let mut perm = w.clone();
        for (dst, src) in [4usize, 2, 0, 3, 1].iter().enumerate() {
            perm.slice_mut(s![dst, .., .., ..]).assign(&w.slice(s![*src, .., .., ..]));
        }
        assert_ne!(m.forward(w.view()).unwrap().mu, m.forward(perm.view()).unwrap().mu);
    }

    #[test]
    fn sequence_length_contract() {
        let m = Model::new(small_cfg(), 7).unwrap();
        assert!(matches!(m.forward(random_window(1, 16, 1).view()), Err(Error::Contract(_))));
        assert!(matches!(m.forward(random_window(11, 16, 1).view()), Err(Error::Contract(_))));
        assert!(matches!(m.forward(random_window(3, 8, 1).view()), Err(Error::Shape(_))));

        let gru = Model::new(ModelConfig { d_model: 24, num_layers: 2, head_hidden: 30, ..ModelConfig::gru() }, 1).unwrap();
        let est = gru.forward(random_window(2, 8, 1).view()).unwrap();
        assert!(est.sigma.iter().all(|&s| s >= 1e-3));
        assert!(matches!(gru.forward(random_window(1, 8, 1).view()), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(small_cfg(), 8).unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
    }
}
