//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to push gradients back to its inputs. Parameters are
//! read from a borrowed [`ParamStore`] and never copied into the tape.
//! Losses whose gradients are cheaper to derive in closed form (softmax
//! cross-entropy, CTC, L1, BCE, guided attention) are recorded as fused
//! nodes that store `d value / d input` at forward time.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Softmax { x: Var },
    LogSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    Sum(Var),
    /// Scalar-valued function of one input with a precomputed gradient.
    Fused { x: Var, grad: Tensor },
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    prenet_only: bool,
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout disabled.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], rng: None, prenet_only: false }
    }

    /// Training graph: dropout active, masks drawn from `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        let mut g = Self::new(params);
        g.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    /// Evaluation graph that still samples pre-net dropout masks.
    pub fn sampling(params: &'p ParamStore, seed: u64) -> Self {
        let mut g = Self::training(params, seed);
        g.prenet_only = true;
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && !self.prenet_only
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "sub shape mismatch");
        out.add_scaled(self.value(b), -1.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `x + 1·b` with `b` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        assert_eq!(bias.cols(), self.shape(x).1, "add_row width mismatch");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddRow(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(alpha);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, alpha), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + math::erf(v * core::f64::consts::FRAC_1_SQRT_2)));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Row-wise layer normalization with learned gain and bias (`[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let (rows, cols) = xt.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / math::sqrt(var + eps);
            rstd.push(s);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Row softmax. `mask[r * cols + c] == false` excludes entry `(r, c)`;
    /// rows with no allowed entry become all-zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xt = self.value(x);
        let (rows, cols) = xt.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), rows * cols, "softmax mask size");
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xt.row(r);
            let allowed = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = math::exp(row[c] - max);
                    o[c] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let mut out = xt.clone();
        for r in 0..out.rows() {
            let lse = math::log_sum_exp(xt.row(r));
            for v in out.row_mut(r) {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&ts);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&ts);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshaped(rows, cols);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Unfolds `[T, C]` into `[T', kernel·C]` patches so a 1-D convolution
    /// becomes one matmul. Row `t'` holds frames `t'·stride − pad ..` in
    /// order, zero outside the input. `T' = (T + 2·pad − kernel) / stride + 1`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let (t, c) = xt.shape();
        let padded = t + 2 * pad;
        assert!(padded >= kernel, "im2col input shorter than kernel");
        let t_out = (padded - kernel) / stride + 1;
        let mut out = Tensor::zeros(t_out, kernel * c);
        for o in 0..t_out {
            let row = out.row_mut(o);
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    row[j * c..(j + 1) * c].copy_from_slice(xt.row(src as usize));
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Im2Col { x, kernel, stride, pad }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Records a scalar `value` of `x` whose gradient `d value / d x` is
    /// already known.
    pub fn fused(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "fused gradient shape");
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::Fused { x, grad }, rg)
    }

    /// Inverted dropout; identity in evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.prenet_only {
            return x;
        }
        self.prenet_dropout(x, p)
    }

    /// Dropout that also fires in [`Graph::sampling`] graphs.
    pub fn prenet_dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = self.shape(x);
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 / (1.0 - p);
        let data = (0..rows * cols).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = self.constant(Tensor::from_vec(rows, cols, data).unwrap());
        self.mul(x, mask)
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    /// Back-propagates from the scalar `root` and returns the gradients of
    /// every parameter and leaf that influences it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward expects a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut params = Grads::new(self.params.len());
        let mut leaves = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, gy, &mut grads, &mut params, &mut leaves);
        }
        Gradients { params, leaves }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        i: usize,
        op: &Op,
        gy: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Grads,
        leaves: &mut Vec<(Var, Tensor)>,
    ) {
        let y = || self.nodes[i].value.as_ref().expect("value");
        match *op {
            Op::Constant => {}
            Op::Leaf => leaves.push((Var(i), gy)),
            Op::Param(id) => params.put(id, gy),
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    self.acc(grads, a, gy.matmul_bt(self.value(b)));
                }
                if self.rg(b) {
                    self.acc(grads, b, self.value(a).matmul_at(&gy));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(a) {
                    self.acc(grads, a, gy.matmul(self.value(b)));
                }
                if self.rg(b) {
                    self.acc(grads, b, gy.matmul_at(self.value(a)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(b) {
                    self.acc(grads, b, gy.clone());
                }
                self.acc(grads, a, gy);
            }
            Op::Sub(a, b) => {
                if self.rg(b) {
                    self.acc(grads, b, gy.map(|v| -v));
                }
                self.acc(grads, a, gy);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let g = zip_map(&gy, self.value(b), |g, v| g * v);
                    self.acc(grads, a, g);
                }
                if self.rg(b) {
                    let g = zip_map(&gy, self.value(a), |g, v| g * v);
                    self.acc(grads, b, g);
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(b) {
                    let mut gb = Tensor::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, b, gb);
                }
                self.acc(grads, x, gy);
            }
            Op::Scale(x, alpha) => {
                let mut g = gy;
                g.scale_in_place(alpha);
                self.acc(grads, x, g);
            }
            Op::Relu(x) => {
                let g = zip_map(&gy, self.value(x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.acc(grads, x, g);
            }
            Op::Gelu(x) => {
                let g = zip_map(&gy, self.value(x), |g, v| {
                    let cdf = 0.5 * (1.0 + math::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = math::exp(-0.5 * v * v) / math::sqrt(2.0 * core::f64::consts::PI);
                    g * (cdf + v * pdf)
                });
                self.acc(grads, x, g);
            }
            Op::Tanh(x) => {
                let g = zip_map(&gy, y(), |g, t| g * (1.0 - t * t));
                self.acc(grads, x, g);
            }
            Op::Sigmoid(x) => {
                let g = zip_map(&gy, y(), |g, s| g * s * (1.0 - s));
                self.acc(grads, x, g);
            }
            Op::LayerNorm { x, gain, bias, ref xhat, ref rstd } => {
                let (rows, cols) = gy.shape();
                let gv = self.value(gain).data();
                if self.rg(gain) || self.rg(bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += gy.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += gy.get(r, c);
                        }
                    }
                    self.acc(grads, gain, dg);
                    self.acc(grads, bias, db);
                }
                if self.rg(x) {
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = gy.get(r, c) * gv[c];
                            sum_d += d;
                            sum_dx += d * xhat.get(r, c);
                        }
                        let s = rstd[r] / n;
                        for c in 0..cols {
                            let d = gy.get(r, c) * gv[c];
                            dx.set(r, c, s * (n * d - sum_d - xhat.get(r, c) * sum_dx));
                        }
                    }
                    self.acc(grads, x, dx);
                }
            }
            Op::Softmax { x } => {
                let yv = y();
                let mut dx = Tensor::zeros(yv.rows(), yv.cols());
                for r in 0..yv.rows() {
                    let (yr, gr) = (yv.row(r), gy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yy, gg)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yy * (gg - dot);
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::LogSoftmax(x) => {
                let yv = y();
                let mut dx = Tensor::zeros(yv.rows(), yv.cols());
                for r in 0..yv.rows() {
                    let gsum: f64 = gy.row(r).iter().sum();
                    for (o, (ly, gg)) in dx.row_mut(r).iter_mut().zip(yv.row(r).iter().zip(gy.row(r))) {
                        *o = gg - math::exp(*ly) * gsum;
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::Gather { table, ref ids } => {
                let (rows, cols) = self.shape(table);
                let mut dt = Tensor::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(gy.row(r)) {
                        *o += v;
                    }
                }
                self.acc(grads, table, dt);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(x);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[start..start + gy.cols()].copy_from_slice(gy.row(r));
                }
                self.acc(grads, x, dx);
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(x);
                let mut dx = Tensor::zeros(rows, cols);
                dx.data_mut()[start * cols..(start + gy.rows()) * cols].copy_from_slice(gy.data());
                self.acc(grads, x, dx);
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        self.acc(grads, p, gy.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.rg(p) {
                        self.acc(grads, p, gy.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::Reshape(x) => {
                let (rows, cols) = self.shape(x);
                self.acc(grads, x, gy.reshaped(rows, cols));
            }
            Op::Im2Col { x, kernel, stride, pad } => {
                let (t, c) = self.shape(x);
                let mut dx = Tensor::zeros(t, c);
                for o in 0..gy.rows() {
                    let row = gy.row(o);
                    for j in 0..kernel {
                        let src = (o * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            for (d, v) in dx.row_mut(src as usize).iter_mut().zip(&row[j * c..(j + 1) * c]) {
                                *d += v;
                            }
                        }
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(x);
                self.acc(grads, x, Tensor::filled(rows, cols, gy.data()[0]));
            }
            Op::Fused { x, ref grad } => {
                let mut g = grad.clone();
                g.scale_in_place(gy.data()[0]);
                self.acc(grads, x, g);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).unwrap()
}

/// Output of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    pub params: Grads,
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central-difference check of `d f / d leaf` for a graph builder `f`.
    fn check(shape: (usize, usize), seed: u64, f: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let x0 = rand_tensor(shape.0, shape.1, seed);
        let mut g = Graph::new(&store);
        let x = g.leaf(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        let eps = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.leaf(xp);
                let y = f(&mut g, x);
                g.scalar(y)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()), "entry {i}: analytic {a} vs numeric {numeric}");
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.shape(y);
        let w = g.constant(rand_tensor(r, c, seed));
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check((3, 4), 1, |g, x| {
            let a = g.gelu(x);
            let b = g.tanh(a);
            let c = g.sigmoid(b);
            let d = g.relu(x);
            let e = g.add(c, d);
            let f = g.mul(e, x);
            weighted_sum(g, f, 9)
        });
    }

    #[test]
    fn matmul_and_layer_norm_match_finite_differences() {
        check((3, 5), 2, |g, x| {
            let w = g.constant(rand_tensor(5, 4, 3));
            let h = g.matmul(x, w);
            let gain = g.constant(rand_tensor(1, 4, 4));
            let bias = g.constant(rand_tensor(1, 4, 5));
            let n = g.layer_norm(h, gain, bias, 1e-5);
            let t = g.matmul_bt(n, h);
            weighted_sum(g, t, 6)
        });
    }

    #[test]
    fn softmax_variants_match_finite_differences() {
        check((3, 4), 7, |g, x| {
            let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4 + 1).collect();
            let s = g.softmax(x, Some(&mask));
            let l = g.log_softmax(x);
            let a = weighted_sum(g, s, 8);
            let b = weighted_sum(g, l, 9);
            g.add(a, b)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check((6, 3), 10, |g, x| {
            let cols = g.im2col(x, 3, 2, 1);
            let a = g.slice_cols(cols, 2, 4);
            let b = g.slice_rows(x, 1, 3);
            let c = g.reshape(b, 1, 9);
            let d = g.concat_cols(&[a, a]);
            let e = g.concat_rows(&[x, x]);
            let s1 = weighted_sum(g, d, 11);
            let s2 = weighted_sum(g, c, 12);
            let s3 = weighted_sum(g, e, 13);
            let t = g.add(s1, s2);
            let u = g.add(t, s3);
            g.scale(u, 0.5)
        });
    }

    #[test]
    fn gather_accumulates_repeated_rows_into_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("emb", ParamGroup::TextEmbedding, rand_tensor(4, 2, 1));
        let mut g = Graph::new(&store);
        let t = g.param(id);
        let rows = g.gather(t, &[1, 1, 3]);
        let s = g.sum(rows);
        let grads = g.backward(s);
        let gt = grads.params.get(id).unwrap();
        assert_eq!(gt.row(0), &[0.0, 0.0]);
        assert_eq!(gt.row(1), &[2.0, 2.0]);
        assert_eq!(gt.row(3), &[1.0, 1.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_graphs() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(rand_tensor(2, 2, 0));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut t = Graph::training(&store, 3);
        let x = t.constant(rand_tensor(8, 8, 0));
        let y = t.dropout(x, 0.5);
        let zeros = t.value(y).data().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 10 && zeros < 54);
    }
}
