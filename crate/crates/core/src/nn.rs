//! Parameterized building blocks shared by the item and sequence towers.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// One forward pass: the tape, read-only parameters and the dropout stream.
pub struct Ctx<'s> {
    pub g: Graph,
    pub store: &'s ParamStore,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'s> Ctx<'s> {
    /// Evaluation context: dropout disabled.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(store: &'s ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            g: Graph::new(),
            store,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let p = self.dropout;
        self.g.dropout(x, p, &mut self.rng)
    }
}

/// Registers parameters under a common name prefix with seeded init.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, self.rng);
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.xavier(&format!("{name}.w"), fan_in, fan_out),
            b: Some(init.constant(&format!("{name}.b"), &[fan_out], 0.0)),
        }
    }

    pub fn without_bias(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.xavier(&format!("{name}.w"), fan_in, fan_out),
            b: None,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.w);
        match self.b {
            Some(b) => {
                let b = ctx.param(b);
                ctx.g.linear(x, w, b)
            }
            None => ctx.g.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Post-norm Transformer encoder layer: multi-head self-attention and a GELU
/// feed-forward block, each followed by residual + layer norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        assert!(dim.is_multiple_of(heads), "hidden size {dim} not divisible by {heads} heads");
        Self {
            heads,
            q: Linear::new(init, &format!("{name}.attn.q"), dim, dim),
            // a key bias shifts every score of a query equally: softmax ignores it
            k: Linear::without_bias(init, &format!("{name}.attn.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.attn.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.attn.o"), dim, dim),
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            ff1: Linear::new(init, &format!("{name}.ffn.1"), dim, ffn),
            ff2: Linear::new(init, &format!("{name}.ffn.2"), ffn, dim),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
        }
    }

    /// `x: [n, l, d]`. With `queries`, only those positions are produced
    /// (keys and values still span all `l`); `mask` must then already be
    /// restricted to the query rows.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: &AttnMask, queries: Option<&[usize]>) -> Var {
        let xq = match queries {
            Some(pos) => ctx.g.select(x, pos),
            None => x,
        };
        let q = self.q.forward(ctx, xq);
        let k = self.k.forward(ctx, x);
        let v = self.v.forward(ctx, x);
        let a = ctx.g.attention(q, k, v, mask, self.heads);
        let a = self.o.forward(ctx, a);
        let a = ctx.dropout(a);
        let h = ctx.g.add(xq, a);
        let h = self.ln1.forward(ctx, h);
        let f = self.ff1.forward(ctx, h);
        let f = ctx.g.gelu(f);
        let f = self.ff2.forward(ctx, f);
        let f = ctx.dropout(f);
        let out = ctx.g.add(h, f);
        self.ln2.forward(ctx, out)
    }
}

/// Runs a stack of layers; the last one only computes `outputs` positions.
pub fn encode_stack(
    ctx: &mut Ctx,
    layers: &[TransformerLayer],
    x: Var,
    mask: &AttnMask,
    outputs: &[usize],
) -> Var {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        if i + 1 == layers.len() {
            let restricted = restrict_mask(mask, ctx.g.shape(h)[1], outputs, ctx.g.shape(h)[0]);
            h = layer.forward(ctx, h, &restricted, Some(outputs));
        } else {
            h = layer.forward(ctx, h, mask, None);
        }
    }
    if layers.is_empty() {
        h = ctx.g.select(h, outputs);
    }
    h
}

/// Keeps only the rows of `mask` for the given query positions.
pub fn restrict_mask(mask: &AttnMask, l: usize, rows: &[usize], n: usize) -> AttnMask {
    match mask {
        AttnMask::None => AttnMask::None,
        AttnMask::Shared(m) => AttnMask::Shared(Arc::new(
            rows.iter().flat_map(|&r| m[r * l..(r + 1) * l].iter().copied()).collect(),
        )),
        AttnMask::PerSample(m) => AttnMask::PerSample(Arc::new(
            (0..n)
                .flat_map(|s| rows.iter().map(move |&r| (s, r)))
                .flat_map(|(s, r)| m[(s * l + r) * l..(s * l + r + 1) * l].iter().copied())
                .collect(),
        )),
    }
}

/// Two-layer head `W2 · LeakyReLU(W1 · x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    l1: Linear,
    l2: Linear,
    slope: f64,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl MlpHead {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.1"), dim, dim),
            l2: Linear::new(init, &format!("{name}.2"), dim, dim),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.l1.forward(ctx, x);
        let h = ctx.g.leaky_relu(h, self.slope);
        self.l2.forward(ctx, h)
    }
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    xz: Linear,
    xr: Linear,
    xn: Linear,
    hz: Linear,
    hr: Linear,
    hn: Linear,
}

impl GruCell {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            xz: Linear::new(init, &format!("{name}.x_update"), dim, dim),
            xr: Linear::new(init, &format!("{name}.x_reset"), dim, dim),
            xn: Linear::new(init, &format!("{name}.x_cand"), dim, dim),
            hz: Linear::new(init, &format!("{name}.h_update"), dim, dim),
            hr: Linear::new(init, &format!("{name}.h_reset"), dim, dim),
            hn: Linear::new(init, &format!("{name}.h_cand"), dim, dim),
        }
    }

    /// `x, h: [b, d]` → next hidden state.
    pub fn step(&self, ctx: &mut Ctx, x: Var, h: Var) -> Var {
        let xz = self.xz.forward(ctx, x);
        let hz = self.hz.forward(ctx, h);
        let z = ctx.g.add(xz, hz);
        let z = ctx.g.sigmoid(z);
        let xr = self.xr.forward(ctx, x);
        let hr = self.hr.forward(ctx, h);
        let r = ctx.g.add(xr, hr);
        let r = ctx.g.sigmoid(r);
        let xn = self.xn.forward(ctx, x);
        let hn = self.hn.forward(ctx, h);
        let hn = ctx.g.mul(r, hn);
        let n = ctx.g.add(xn, hn);
        let n = ctx.g.tanh(n);
        // h' = n + z ⊙ (h - n)
        let diff = ctx.g.sub(h, n);
        let gated = ctx.g.mul(z, diff);
        ctx.g.add(n, gated)
    }
}
