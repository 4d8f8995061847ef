//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records operations during a forward pass. Parameters are
//! borrowed from a slice owned by the model, so building a graph never copies
//! weights. [`Graph::backward`] walks the tape in reverse and returns one
//! gradient matrix per parameter.
//!
//! Operations are coarse-grained (layer norm, multi-head attention, Gaussian
//! NLL are single nodes) so that the tape stays short and each backward rule
//! can be written and checked in closed form.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `x + b` with `b` a `1 x m` row broadcast over rows.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// `1 - x`
    OneMinus(NodeId),
    /// `softplus(x) + floor`
    Softplus(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    /// Adds `spatial[p] + temporal[t]` to row `(b, t, p)` of a token matrix.
    AddPositional {
        x: NodeId,
        spatial: NodeId,
        temporal: NodeId,
        steps: usize,
        patches: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        group: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    GaussianNll {
        mu: NodeId,
        sigma: NodeId,
        target: Array2<f64>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

/// Per-row softmax with max subtraction.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Single-head scaled dot-product attention, `softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    softmax_rows(&mut scores);
    scores.dot(&v)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Graph<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
    softplus_floor: f64,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self { params, nodes: Vec::with_capacity(256), softplus_floor: 0.0 }
    }

    /// Floor added by every [`Graph::softplus`] node.
    pub fn set_softplus_floor(&mut self, floor: f64) {
        self.softplus_floor = floor;
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v.view(),
            (None, Op::Param(i)) => self.params[*i].view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.nodes.push(Node { value: None, op: Op::Param(index) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let v = &self.value(x) + &self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: NodeId, weight: usize, bias: usize) -> NodeId {
        let w = self.param(weight);
        let b = self.param(bias);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|v| v.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|v| 1.0 - v);
        self.push(v, Op::OneMinus(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let floor = self.softplus_floor;
        let v = self.value(x).mapv(|v| softplus(v) + floor);
        self.push(v, Op::Softplus(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: usize, bias: usize) -> NodeId {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let mut xhat = xv.to_owned();
        let mut inv_std = Array1::zeros(xv.nrows());
        for ((mut row, m), is) in xhat.rows_mut().into_iter().zip(mean.iter()).zip(inv_std.iter_mut()) {
            row -= *m;
            let var = row.dot(&row) / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let out = &xhat * &self.value(gain) + &self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Inverted dropout: `mask` holds `0` or `1/(1-p)`.
    pub fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> NodeId {
        let v = &self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Token rows are ordered `(batch, time, patch)`.
    pub fn add_positional(
        &mut self,
        x: NodeId,
        spatial: usize,
        temporal: usize,
        steps: usize,
        patches: usize,
    ) -> NodeId {
        let spatial = self.param(spatial);
        let temporal = self.param(temporal);
        let mut v = self.value(x).to_owned();
        {
            let sp = self.value(spatial);
            let tm = self.value(temporal);
            for (r, mut row) in v.rows_mut().into_iter().enumerate() {
                let p = r % patches;
                let t = (r / patches) % steps;
                row += &sp.row(p);
                row += &tm.row(t);
            }
        }
        self.push(v, Op::AddPositional { x, spatial, temporal, steps, patches })
    }

    /// Multi-head attention applied independently to consecutive groups of
    /// `group` rows (one group per sequence in the batch).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, group: usize, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dm) = qv.dim();
        assert_eq!(rows % group, 0, "rows must be a multiple of the group size");
        assert_eq!(dm % heads, 0, "model dim must be divisible by heads");
        let dk = dm / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Array2::zeros((rows, dm));
        let mut probs = Vec::with_capacity(rows / group * heads);
        for b in 0..rows / group {
            let r = b * group..(b + 1) * group;
            for h in 0..heads {
                let c = h * dk..(h + 1) * dk;
                let qs = qv.slice(s![r.clone(), c.clone()]);
                let ks = kv.slice(s![r.clone(), c.clone()]);
                let vs = vv.slice(s![r.clone(), c.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, group, heads, probs })
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let v = self.value(x).select(Axis(0), &rows);
        self.push(v, Op::GatherRows { x, rows })
    }

    /// Mean Gaussian negative log-likelihood, a `1 x 1` node.
    pub fn gaussian_nll(&mut self, mu: NodeId, sigma: NodeId, target: Array2<f64>) -> NodeId {
        let loss = gaussian_nll_mean(self.value(mu), self.value(sigma), target.view());
        self.push(Array2::from_elem((1, 1), loss), Op::GaussianNll { mu, sigma, target })
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Vec<Array2<f64>> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Array2<f64>> =
            self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.value(*b);
                    let gb = &g * &self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(NodeId(idx));
                    let gx = Zip::from(&g).and(y).map_collect(|g, y| g * y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let y = self.value(NodeId(idx));
                    let gx = Zip::from(&g).and(y).map_collect(|g, y| g * (1.0 - y * y));
                    acc(&mut grads, *x, gx);
                }
                Op::OneMinus(x) => acc(&mut grads, *x, -&g),
                Op::Softplus(x) => {
                    let gx = Zip::from(&g).and(self.value(*x)).map_collect(|g, &v| g * sigmoid(v));
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = xhat.ncols() as f64;
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &self.value(*gain);
                    let mut gx = Array2::zeros(g.raw_dim());
                    for (((mut out, dxh), xh), is) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std.iter())
                    {
                        let sum_d = dxh.sum();
                        let sum_dx = dxh.dot(&xh);
                        Zip::from(&mut out).and(&dxh).and(&xh).for_each(|o, &dh, &h| {
                            *o = is / d * (d * dh - sum_d - h * sum_dx);
                        });
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => acc(&mut grads, *x, &g * mask),
                Op::AddPositional { x, spatial, temporal, steps, patches } => {
                    let mut gs = Array2::zeros(self.value(*spatial).raw_dim());
                    let mut gt = Array2::zeros(self.value(*temporal).raw_dim());
                    for (r, row) in g.rows().into_iter().enumerate() {
                        let p = r % patches;
                        let t = (r / patches) % steps;
                        let mut srow = gs.row_mut(p);
                        srow += &row;
                        let mut trow = gt.row_mut(t);
                        trow += &row;
                    }
                    acc(&mut grads, *spatial, gs);
                    acc(&mut grads, *temporal, gt);
                    acc(&mut grads, *x, g);
                }
                Op::Attention { q, k, v, group, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, dm) = qv.dim();
                    let dk = dm / heads;
                    let scale = 1.0 / (dk as f64).sqrt();
                    let mut gq = Array2::zeros((rows, dm));
                    let mut gk = Array2::zeros((rows, dm));
                    let mut gv = Array2::zeros((rows, dm));
                    for b in 0..rows / group {
                        let r = b * group..(b + 1) * group;
                        for h in 0..*heads {
                            let c = h * dk..(h + 1) * dk;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let qs = qv.slice(s![r.clone(), c.clone()]);
                            let ks = kv.slice(s![r.clone(), c.clone()]);
                            let vs = vv.slice(s![r.clone(), c.clone()]);
                            gv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vs.t());
                            let mut ds = &dp * p;
                            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = dsr.sum();
                                Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d -= pv * dot);
                            }
                            ds *= scale;
                            gq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
                            gk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (src, &dst) in g.rows().into_iter().zip(rows.iter()) {
                        let mut row = gx.row_mut(dst);
                        row += &src;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::GaussianNll { mu, sigma, target } => {
                    let scale = g[[0, 0]] / target.len() as f64;
                    let (mv, sv) = (self.value(*mu), self.value(*sigma));
                    let mut gmu = Array2::zeros(mv.raw_dim());
                    let mut gsig = Array2::zeros(sv.raw_dim());
                    Zip::from(&mut gmu)
                        .and(&mut gsig)
                        .and(mv)
                        .and(sv)
                        .and(target)
                        .for_each(|gm, gs, &m, &s, &x| {
                            let r = x - m;
                            let inv2 = 1.0 / (s * s);
                            *gm = -r * inv2 * scale;
                            *gs = (1.0 / s - r * r * inv2 / s) * scale;
                        });
                    acc(&mut grads, *mu, gmu);
                    acc(&mut grads, *sigma, gsig);
                }
            }
        }
        param_grads
    }
}

/// `mean( 0.5 ln(2 pi sigma^2) + (x - mu)^2 / (2 sigma^2) )`, summed with
/// Neumaier compensation.
pub fn gaussian_nll_mean(mu: ArrayView2<f64>, sigma: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let (mut total, mut comp) = (0.0f64, 0.0f64);
    Zip::from(mu).and(sigma).and(target).for_each(|&m, &s, &x| {
        let r = x - m;
        let term = s.ln() + r * r / (2.0 * s * s);
        let t = total + term;
        comp += if total.abs() >= term.abs() { (total - t) + term } else { (term - t) + total };
        total = t;
    });
    half_ln_2pi + (total + comp) / target.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences over every parameter entry.
    fn numeric_grads(
        params: &mut [Array2<f64>],
        f: &dyn Fn(&[Array2<f64>]) -> f64,
    ) -> Vec<Array2<f64>> {
        let h = 1e-6;
        let mut out = Vec::new();
        for i in 0..params.len() {
            let mut g = Array2::zeros(params[i].raw_dim());
            for idx in 0..params[i].len() {
                let (r, c) = (idx / params[i].ncols(), idx % params[i].ncols());
                let orig = params[i][[r, c]];
                params[i][[r, c]] = orig + h;
                let up = f(params);
                params[i][[r, c]] = orig - h;
                let down = f(params);
                params[i][[r, c]] = orig;
                g[[r, c]] = (up - down) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn assert_close(a: &[Array2<f64>], b: &[Array2<f64>], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            for (u, v) in x.iter().zip(y.iter()) {
                let denom = u.abs().max(v.abs()).max(1e-6);
                assert!((u - v).abs() / denom < tol, "analytic {u} vs numeric {v}");
            }
        }
    }

    fn pseudo(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let k = (i * 31 + j * 17) as f64 + seed as f64 * 7.3;
            (k * 0.618).sin() * 0.8
        })
    }

    #[test]
    fn attention_block_gradients() {
        // params: x, wq, wk, wv, gain, bias, target-free loss via nll
        let mut params = vec![
            pseudo(6, 4, 1),
            pseudo(4, 4, 2),
            pseudo(4, 4, 3),
            pseudo(4, 4, 4),
            pseudo(1, 4, 5) + 1.0,
            pseudo(1, 4, 6),
            pseudo(1, 4, 7),
        ];
        let target = pseudo(6, 4, 9);
        let f = |p: &[Array2<f64>], want_grad: bool| {
            let mut g = Graph::new(p);
            let x = g.param(0);
            let x = g.layer_norm(x, 4, 5);
            let wq = g.param(1);
            let wk = g.param(2);
            let wv = g.param(3);
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let a = g.attention(q, k, v, 3, 2);
            let sig = g.param(6);
            let ones = g.input(Array2::zeros((6, 4)));
            let sig = g.add_row(ones, sig);
            let sig = g.softplus(sig);
            let loss = g.gaussian_nll(a, sig, target.clone());
            let val = g.value(loss)[[0, 0]];
            (val, if want_grad { Some(g.backward(loss)) } else { None })
        };
        let analytic = f(&params, true).1.unwrap();
        let numeric = numeric_grads(&mut params, &|p| f(p, false).0);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn elementwise_and_gather_gradients() {
        let mut params = vec![pseudo(5, 3, 1), pseudo(3, 3, 2), pseudo(1, 3, 3), pseudo(2, 3, 4), pseudo(4, 3, 5)];
        let target = pseudo(2, 3, 8);
        let f = |p: &[Array2<f64>], want: bool| {
            let mut g = Graph::new(p);
            let x = g.param(0);
            let h = g.linear(x, 1, 2);
            let a = g.sigmoid(h);
            let b = g.tanh(h);
            let c = g.one_minus(a);
            let d = g.mul(c, b);
            let e = g.add(d, a);
            let f2 = g.sub(e, b);
            let r = g.relu(f2);
            let pos = g.add_positional(r, 3, 4, 4, 1);
            let rows = g.gather_rows(pos, vec![4, 1]);
            let s = g.softplus(rows);
            let loss = g.gaussian_nll(rows, s, target.clone());
            let val = g.value(loss)[[0, 0]];
            (val, if want { Some(g.backward(loss)) } else { None })
        };
        let analytic = f(&params, true).1.unwrap();
        let numeric = numeric_grads(&mut params, &|p| f(p, false).0);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = array![[0.3, -1.2]];
        let k = array![[2.0, 0.5]];
        let v = array![[7.0, -3.0]];
        assert_eq!(attention(q.view(), k.view(), v.view()), v);
    }

    #[test]
    fn zero_query_gives_column_mean() {
        let q = Array2::zeros((3, 2));
        let k = pseudo(3, 2, 1);
        let v = array![[1.0, 2.0], [3.0, 5.0], [8.0, -1.0]];
        let out = attention(q.view(), k.view(), v.view());
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_stable_for_large_scores() {
        let mut s = array![[1000.0, 1001.0, 999.0]];
        softmax_rows(&mut s);
        assert!((s.sum() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|v| v.is_finite()));
    }
}
