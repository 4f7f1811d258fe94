//! Layer building blocks shared by the encoders and both branches.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add_weight(&format!("{name}.weight"), (d_in, d_out), rng),
            bias: store.add_zeros(&format!("{name}.bias"), (1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, d))),
            beta: store.add_zeros(&format!("{name}.beta"), (1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Scaled dot-product attention with `heads` equal-width heads.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), d, d, rng),
            key: Linear::new(store, &format!("{name}.k"), d, d, rng),
            value: Linear::new(store, &format!("{name}.v"), d, d, rng),
            output: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Rows of `queries` attend over rows of `memory`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, memory: Var) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, memory);
        let v = self.value.forward(g, store, memory);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, store, joined)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Position-wise two-layer feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.up.params();
        p.extend(self.down.params());
        p
    }
}

/// Pre-norm transformer block. With `cross` set, a cross-attention sublayer
/// over an external memory follows self-attention (decoder form).
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, cross: bool, rng: &mut impl Rng) -> Self {
        TransformerLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            cross: cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                    MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
                )
            }),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, 2 * d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Option<Var>) -> Var {
        let n = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, n, n);
        let mut x = g.add(x, a);
        if let (Some((norm, cross)), Some(mem)) = (&self.cross, memory) {
            let n = norm.forward(g, store, x);
            let c = cross.forward(g, store, n, mem);
            x = g.add(x, c);
        }
        let n = self.norm_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, n);
        g.add(x, f)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm_attn.params();
        p.extend(self.attn.params());
        if let Some((norm, cross)) = &self.cross {
            p.extend(norm.params());
            p.extend(cross.params());
        }
        p.extend(self.norm_ff.params());
        p.extend(self.ff.params());
        p
    }
}

/// Stack of self-attention blocks followed by a final norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, depth: usize, heads: usize, rng: &mut impl Rng) -> Self {
        TransformerEncoder {
            layers: (0..depth)
                .map(|l| TransformerLayer::new(store, &format!("{name}.layer{l}"), d, heads, false, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let x = self.layers.iter().fold(x, |x, layer| layer.forward(g, store, x, None));
        self.norm.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<_> = self.layers.iter().flat_map(|l| l.params()).collect();
        p.extend(self.norm.params());
        p
    }
}

/// Single-direction LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Array2::zeros((1, 4 * hidden));
        // forget-gate bias of 1
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        Lstm {
            w_input: store.add_weight(&format!("{name}.w_input"), (d_in, 4 * hidden), rng),
            w_hidden: store.add_weight(&format!("{name}.w_hidden"), (hidden, 4 * hidden), rng),
            bias: store.add(format!("{name}.bias"), bias),
            hidden,
        }
    }

    /// Runs over the rows of `x` in the given order; returns one hidden state per step.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Vec<Var> {
        let steps = g.shape(x).0;
        let w_in = g.param(store, self.w_input);
        let w_h = g.param(store, self.w_hidden);
        let b = g.param(store, self.bias);
        let projected = g.matmul(x, w_in);
        let projected = g.add_row(projected, b);
        let hd = self.hidden;
        let mut h = g.constant(Array2::zeros((1, hd)));
        let mut c = g.constant(Array2::zeros((1, hd)));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = g.slice_rows(projected, t, 1);
            let hh = g.matmul(h, w_h);
            let gates = g.add(xt, hh);
            let i = g.slice_cols(gates, 0, hd);
            let f = g.slice_cols(gates, hd, hd);
            let cand = g.slice_cols(gates, 2 * hd, hd);
            let o = g.slice_cols(gates, 3 * hd, hd);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            states[t] = h;
        }
        states
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_input, self.w_hidden, self.bias]
    }
}

/// 3×3 convolution over a square 2-D map.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Conv3x3 {
            weight: store.add_weight(&format!("{name}.weight"), (9 * c_in, c_out), rng),
            bias: store.add_zeros(&format!("{name}.bias"), (1, c_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grid: usize) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv3x3(x, w, grid);
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Fixed sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Width of [`relative_position_features`].
pub const RELATIVE_POSITION_WIDTH: usize = 8;

/// Features of the normalised position `(r + ½)/n` of each of `n` rows, so
/// sequences of different length can be aligned by relative offset.
pub fn relative_position_features(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, RELATIVE_POSITION_WIDTH), |(r, k)| {
        let u = (r as f64 + 0.5) / n as f64;
        let freq = (k / 2 + 1) as f64 * std::f64::consts::PI;
        if k % 2 == 0 {
            (freq * u).sin()
        } else {
            (freq * u).cos()
        }
    })
}
