//! Per-branch user encoders over sequences of final item embeddings.

use std::sync::Arc;

use crate::config::Backbone;
use crate::nn::{encode_stack, Ctx, GruCell, Init, TransformerLayer};
use crate::numerics::{AttnMask, ParamId, Tensor, Var, BLOCKED};

#[derive(Clone, Debug)]
enum Body {
    Attention {
        pos: ParamId,
        layers: Vec<TransformerLayer>,
    },
    Recurrent(GruCell),
}

#[derive(Clone, Copy, Debug)]
pub struct SeqSpec {
    pub backbone: Backbone,
    pub d: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

#[derive(Clone, Debug)]
pub struct SeqTower {
    d: usize,
    max_len: usize,
    body: Body,
}

/// Rows left-padded to a common length, with end-aligned positions.
struct Padded {
    len: usize,
    /// `[B·len]` row indices into the item matrix; padding reuses index 0.
    gather: Vec<usize>,
    real: Vec<bool>,
}

fn pad_rows(rows: &[&[usize]], max_len: usize) -> Padded {
    let len = rows.iter().map(|r| r.len().min(max_len)).max().unwrap_or(0);
    let mut gather = Vec::with_capacity(rows.len() * len);
    let mut real = Vec::with_capacity(rows.len() * len);
    for row in rows {
        let row = &row[row.len().saturating_sub(max_len)..];
        let pad = len - row.len();
        gather.extend(std::iter::repeat_n(0, pad).chain(row.iter().copied()));
        real.extend((0..len).map(|j| j >= pad));
    }
    Padded { len, gather, real }
}

impl SeqTower {
    pub fn new(init: &mut Init, name: &str, spec: &SeqSpec) -> Self {
        let SeqSpec {
            backbone,
            d,
            max_len,
            layers,
            heads,
            ffn,
        } = *spec;
        let body = match backbone {
            Backbone::SelfAttention => Body::Attention {
                pos: init.normal(&format!("{name}.pos"), &[max_len, d], 0.02),
                layers: (0..layers)
                    .map(|l| TransformerLayer::new(init, &format!("{name}.layer.{l}"), d, heads, ffn))
                    .collect(),
            },
            Backbone::Recurrent => Body::Recurrent(GruCell::new(init, &format!("{name}.gru"), d)),
        };
        Self { d, max_len, body }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// User vectors `[B, d]`: the representation after each row's last item.
    /// `items: [n, d]`; rows hold indices into it (only the most recent
    /// `max_len` are used).
    pub fn encode_batch(&self, ctx: &mut Ctx, items: Var, rows: &[&[usize]]) -> Var {
        let p = pad_rows(rows, self.max_len);
        let b = rows.len();
        match &self.body {
            Body::Attention { .. } => {
                let h = self.attend(ctx, items, rows, &p, Some(p.len - 1));
                ctx.g.reshape(h, &[b, self.d])
            }
            Body::Recurrent(cell) => self.recur(ctx, cell, items, b, &p),
        }
    }

    /// Self-attention outputs at every position, `[B, L, d]`, for inspection.
    pub fn encode_batch_full(&self, ctx: &mut Ctx, items: Var, rows: &[&[usize]]) -> Var {
        let p = pad_rows(rows, self.max_len);
        self.attend(ctx, items, rows, &p, None)
    }

    fn attend(&self, ctx: &mut Ctx, items: Var, rows: &[&[usize]], p: &Padded, last: Option<usize>) -> Var {
        let Body::Attention { pos, layers } = &self.body else {
            panic!("full outputs need the self-attention backbone");
        };
        assert!(rows.iter().all(|r| !r.is_empty()), "empty sequence");
        let (b, l, d) = (rows.len(), p.len, self.d);
        let x = ctx.g.gather_rows(items, &p.gather);
        let x = ctx.g.reshape(x, &[b, l, d]);
        // position of slot j in a window of length l, aligned to max_len
        let slots: Vec<usize> = (0..l).map(|j| self.max_len - l + j).collect();
        let pos_table = ctx.param(*pos);
        let pe = ctx.g.gather_rows(pos_table, &slots);
        let pe = ctx.g.reshape(pe, &[1, l, d]);
        let pe = ctx.g.gather_rows(pe, &vec![0; b]);
        let x = ctx.g.add(x, pe);
        let x = ctx.dropout(x);
        let mut mask = vec![0.0; b * l * l];
        for s in 0..b {
            for q in 0..l {
                for k in 0..l {
                    let visible = if p.real[s * l + q] {
                        k <= q && p.real[s * l + k]
                    } else {
                        k == q
                    };
                    if !visible {
                        mask[(s * l + q) * l + k] = BLOCKED;
                    }
                }
            }
        }
        let mask = AttnMask::PerSample(Arc::new(mask));
        match last {
            Some(pos) => encode_stack(ctx, layers, x, &mask, &[pos]),
            None => {
                let all: Vec<usize> = (0..l).collect();
                let mut h = x;
                for layer in layers {
                    h = layer.forward(ctx, h, &mask, None);
                }
                if layers.is_empty() {
                    h = ctx.g.select(h, &all);
                }
                h
            }
        }
    }

    fn recur(&self, ctx: &mut Ctx, cell: &GruCell, items: Var, b: usize, p: &Padded) -> Var {
        let (l, d) = (p.len, self.d);
        let mut h = ctx.g.constant(Tensor::zeros(&[b, d]));
        for j in 0..l {
            let idx: Vec<usize> = (0..b).map(|s| p.gather[s * l + j]).collect();
            let x = ctx.g.gather_rows(items, &idx);
            let x = ctx.dropout(x);
            let next = cell.step(ctx, x, h);
            let keep: Vec<f64> = (0..b)
                .flat_map(|s| std::iter::repeat_n(if p.real[s * l + j] { 1.0 } else { 0.0 }, d))
                .collect();
            if keep.iter().all(|&k| k == 1.0) {
                h = next;
                continue;
            }
            let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = ctx.g.constant(Tensor::new(&[b, d], keep).unwrap());
            let hold = ctx.g.constant(Tensor::new(&[b, d], hold).unwrap());
            let a = ctx.g.mul(keep, next);
            let c = ctx.g.mul(hold, h);
            h = ctx.g.add(a, c);
        }
        h
    }
}
