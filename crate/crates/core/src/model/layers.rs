//! Building blocks shared by every network component.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers parameters with seeded initial values.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                // Box-Muller
                let u1: f64 = 1.0 - self.rng.random::<f64>();
                let u2: f64 = self.rng.random::<f64>();
                std * math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| (self.rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        self.store.add(name, group, value)
    }

    /// Xavier-uniform weight `[fan_in, fan_out]` plus optional zero bias.
    pub fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let w = self.uniform(fan_in, fan_out, bound);
        let weight = self.add(&format!("{name}.weight"), group, w);
        let bias = bias.then(|| self.add(&format!("{name}.bias"), group, Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub fn layer_norm(&mut self, name: &str, group: ParamGroup, width: usize) -> LayerNorm {
        let gain = self.add(&format!("{name}.gain"), group, Tensor::filled(1, width, 1.0));
        let bias = self.add(&format!("{name}.bias"), group, Tensor::zeros(1, width));
        LayerNorm { gain, bias }
    }

    /// Convolution stored in unfolded form: weight `[kernel·c_in, c_out]`.
    pub fn conv(&mut self, name: &str, group: ParamGroup, spec: ConvSpec, bias: bool) -> Conv1d {
        let fan_in = spec.kernel * spec.c_in;
        let w = self.normal(fan_in, spec.c_out, math::sqrt(2.0 / fan_in as f64));
        let weight = self.add(&format!("{name}.weight"), group, w);
        let bias = bias.then(|| self.add(&format!("{name}.bias"), group, Tensor::zeros(1, spec.c_out)));
        Conv1d { weight, bias, spec }
    }

    pub fn attention(&mut self, name: &str, group: ParamGroup, d: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), group, d, d, true),
            k: self.linear(&format!("{name}.k"), group, d, d, true),
            v: self.linear(&format!("{name}.v"), group, d, d, true),
            o: self.linear(&format!("{name}.o"), group, d, d, true),
            heads,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv1d {
    /// `[T, c_in] -> [T', c_out]`
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col(x, self.spec.kernel, self.spec.stride, self.spec.pad);
        let w = g.param(self.weight);
        let y = g.matmul(cols, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Multi-head scaled dot-product attention. `mask` is row-major
    /// `[queries, keys]`, `true` = may attend. Per-head probability maps are
    /// appended to `maps` when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        mask: Option<&[bool]>,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Var {
        let d = g.shape(queries).1;
        let dh = d / self.heads;
        let q = self.q.forward(g, queries);
        let q = g.scale(q, 1.0 / math::sqrt(dh as f64));
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, keys);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let scores = g.matmul_bt(qh, kh);
            let probs = g.softmax(scores, mask);
            if let Some(m) = maps.as_deref_mut() {
                m.push(probs);
            }
            outs.push(g.matmul(probs, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Pre-norm encoder stack with a final layer norm.
#[derive(Clone, Debug)]
pub(crate) struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

/// Pre-norm decoder stack with a final layer norm.
#[derive(Clone, Debug)]
pub(crate) struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
}

impl<'a> Init<'a> {
    fn ffn(&mut self, name: &str, group: ParamGroup, d: usize, d_ffn: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), group, d, d_ffn, true),
            down: self.linear(&format!("{name}.down"), group, d_ffn, d, true),
        }
    }

    pub fn encoder_stack(&mut self, name: &str, group: ParamGroup, n: usize, d: usize, d_ffn: usize, heads: usize) -> EncoderStack {
        let layers = (0..n)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                EncoderLayer {
                    ln_attn: self.layer_norm(&format!("{p}.ln_attn"), group, d),
                    attn: self.attention(&format!("{p}.self_attn"), group, d, heads),
                    ln_ffn: self.layer_norm(&format!("{p}.ln_ffn"), group, d),
                    ffn: self.ffn(&format!("{p}.ffn"), group, d, d_ffn),
                }
            })
            .collect();
        EncoderStack { layers, ln_out: self.layer_norm(&format!("{name}.ln_out"), group, d) }
    }

    pub fn decoder_stack(&mut self, name: &str, group: ParamGroup, n: usize, d: usize, d_ffn: usize, heads: usize) -> DecoderStack {
        let layers = (0..n)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                DecoderLayer {
                    ln_self: self.layer_norm(&format!("{p}.ln_self"), group, d),
                    self_attn: self.attention(&format!("{p}.self_attn"), group, d, heads),
                    ln_cross: self.layer_norm(&format!("{p}.ln_cross"), group, d),
                    cross_attn: self.attention(&format!("{p}.cross_attn"), group, d, heads),
                    ln_ffn: self.layer_norm(&format!("{p}.ln_ffn"), group, d),
                    ffn: self.ffn(&format!("{p}.ffn"), group, d, d_ffn),
                }
            })
            .collect();
        DecoderStack { layers, ln_out: self.layer_norm(&format!("{name}.ln_out"), group, d) }
    }
}

impl EncoderStack {
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>, dropout: f64) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let n = layer.ln_attn.forward(g, h);
            let a = layer.attn.forward(g, n, n, mask, None);
            let a = g.dropout(a, dropout);
            h = g.add(h, a);
            let n = layer.ln_ffn.forward(g, h);
            let f = layer.ffn.forward(g, n, dropout);
            let f = g.dropout(f, dropout);
            h = g.add(h, f);
        }
        self.ln_out.forward(g, h)
    }
}

impl DecoderStack {
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        self_mask: &[bool],
        cross_mask: Option<&[bool]>,
        dropout: f64,
        mut maps: Option<&mut Vec<Vec<Var>>>,
    ) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let n = layer.ln_self.forward(g, h);
            let a = layer.self_attn.forward(g, n, n, Some(self_mask), None);
            let a = g.dropout(a, dropout);
            h = g.add(h, a);
            let n = layer.ln_cross.forward(g, h);
            let mut layer_maps = Vec::new();
            let keep = maps.is_some().then_some(&mut layer_maps);
            let c = layer.cross_attn.forward(g, n, memory, cross_mask, keep);
            if let Some(m) = maps.as_deref_mut() {
                m.push(layer_maps);
            }
            let c = g.dropout(c, dropout);
            h = g.add(h, c);
            let n = layer.ln_ffn.forward(g, h);
            let f = layer.ffn.forward(g, n, dropout);
            let f = g.dropout(f, dropout);
            h = g.add(h, f);
        }
        self.ln_out.forward(g, h)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..d / 2 {
            let freq = math::exp(-((2 * i) as f64) / d as f64 * math::ln(10000.0));
            let angle = pos as f64 * freq;
            row[2 * i] = math::sin(angle);
            row[2 * i + 1] = math::cos(angle);
        }
    }
    t
}

/// Causal self-attention mask `[n, n]`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Cross-attention mask `[queries, keys]` from a key validity vector.
pub fn key_mask(queries: usize, keys: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(queries * keys.len());
    for _ in 0..queries {
        m.extend_from_slice(keys);
    }
    m
}
