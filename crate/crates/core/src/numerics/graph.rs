//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and returns
//! the gradients of a scalar root with respect to every reachable parameter
//! and every leaf created with [`Graph::leaf`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Additive attention mask. `f64::NEG_INFINITY` marks a blocked entry, which
/// receives exactly zero probability and exactly zero gradient.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    /// One `[lq, lk]` mask shared by every sample.
    Shared(Arc<Vec<f64>>),
    /// One `[lq, lk]` mask per sample, stored as `[n, lq, lk]`.
    PerSample(Arc<Vec<f64>>),
}

impl AttnMask {
    #[inline]
    fn get(&self, n: usize, i: usize, j: usize, lq: usize, lk: usize) -> f64 {
        match self {
            AttnMask::None => 0.0,
            AttnMask::Shared(m) => m[i * lk + j],
            AttnMask::PerSample(m) => m[(n * lq + i) * lk + j],
        }
    }
}

pub const BLOCKED: f64 = f64::NEG_INFINITY;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, w: Var },
    MatMulNt { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu { x: Var, slope: f64 },
    Gelu { x: Var, tanh: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows { x: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var> },
    Select { x: Var, positions: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax { x: Var, blocked: Option<Arc<Vec<bool>>> },
    Pick { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat { .. } => "concat",
            Op::Select { .. } => "select",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct GradientSet {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<Var, Tensor>,
}

impl GradientSet {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, leaf: Var) -> Option<&Tensor> {
        self.leaves.get(&leaf)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.leaves.is_empty()
    }
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input. No gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// An input whose gradient is reported by [`GradientSet::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    /// Copies a value onto the tape without a gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// `x · w` where `x` is `[.., k]` and `w` is `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        assert_eq!(ws.shape().len(), 2, "matmul weight must be 2-D");
        let k = ws.shape()[0];
        let n = ws.shape()[1];
        assert_eq!(xs.last_dim(), k, "matmul inner dimension mismatch");
        let m = xs.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xs.data(), false, ws.data(), false, &mut out, false);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a: x, w }, &[x, w])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape().len(), 2);
        assert_eq!(bv.shape().len(), 2);
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[0];
        assert_eq!(bv.shape()[1], k, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, false);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt { a, b },
            &[a, b],
        )
    }

    /// Adds `b: [n]` to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = xv.last_dim();
        assert_eq!(bv.len(), n, "bias length mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias { x, b }, &[x, b])
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv.data().iter().map(|&v| fast_tanh(gelu_inner(v))).collect();
        let out = xv
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::Gelu { x, tanh }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::ln);
        self.push(t, Op::Log(x), &[x])
    }

    /// Normalizes the last dimension, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention with an additive mask.
    ///
    /// `q: [n, lq, d]`, `k, v: [n, lk, d]`; `d` must be divisible by `heads`.
    /// Every query row needs at least one visible key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttnMask, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.shape().len(), 3, "attention expects [n, l, d] inputs");
        let (n, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        assert_eq!(kv.shape(), &[n, lk, d], "attention key shape");
        assert_eq!(vv.shape(), &[n, lk, d], "attention value shape");
        assert!(heads > 0 && d % heads == 0, "model dim must divide into heads");
        match mask {
            AttnMask::Shared(m) => assert_eq!(m.len(), lq * lk, "shared mask size"),
            AttnMask::PerSample(m) => assert_eq!(m.len(), n * lq * lk, "per-sample mask size"),
            AttnMask::None => {}
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; n * lq * d];
        let mut probs = vec![0.0; n * heads * lq * lk];
        let mut scores = vec![0.0; lk];
        for s in 0..n {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(s * lq + i) * d + off..(s * lq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let m = mask.get(s, i, j, lq, lk);
                        if m == BLOCKED {
                            scores[j] = BLOCKED;
                            continue;
                        }
                        let krow = &kd[(s * lk + j) * d + off..(s * lk + j) * d + off + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        let sc = dot * scale + m;
                        scores[j] = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                    assert!(max > f64::NEG_INFINITY, "attention row with no visible key");
                    let prow = &mut probs[((s * heads + h) * lq + i) * lk..][..lk];
                    let mut total = 0.0;
                    for j in 0..lk {
                        let p = if scores[j] == BLOCKED {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        prow[j] = p;
                        total += p;
                    }
                    for p in prow.iter_mut() {
                        *p /= total;
                    }
                    let orow = &mut out[(s * lq + i) * d + off..(s * lq + i) * d + off + dh];
                    for j in 0..lk {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(s * lk + j) * d + off..(s * lk + j) * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, lq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Rows `idx` of `x` viewed as `[rows, ..]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert!(!xv.shape().is_empty());
        let rows = xv.shape()[0];
        let width = xv.len().checked_div(rows).unwrap_or(0);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            assert!(i < rows, "gather index {i} out of range {rows}");
            out.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Concatenates `[n, l_i, d]` tensors along the middle axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        assert_eq!(first.len(), 3, "concat expects [n, l, d] parts");
        let (n, d) = (first[0], first[2]);
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.value(*p).shape();
                assert_eq!((s.len(), s[0], s[2]), (3, n, d), "concat part shape");
                s[1]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(n * total * d);
        for s in 0..n {
            for (p, &l) in parts.iter().zip(&lens) {
                let data = self.value(*p).data();
                out.extend_from_slice(&data[s * l * d..(s + 1) * l * d]);
            }
        }
        self.push(
            Tensor::from_parts(vec![n, total, d], out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Picks positions along the middle axis of `x: [n, l, d]`.
    pub fn select(&mut self, x: Var, positions: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 3, "select expects [n, l, d]");
        let (n, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Vec::with_capacity(n * positions.len() * d);
        for s in 0..n {
            for &p in positions {
                assert!(p < l, "select position out of range");
                out.extend_from_slice(&xv.data()[(s * l + p) * d..(s * l + p + 1) * d]);
            }
        }
        self.push(
            Tensor::from_parts(vec![n, positions.len(), d], out),
            Op::Select {
                x,
                positions: positions.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count mismatch");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last dimension. Entries flagged in `blocked` are
    /// left out of the normalization, read as 0 and receive no gradient.
    pub fn log_softmax(&mut self, x: Var, blocked: Option<Arc<Vec<bool>>>) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        if let Some(b) = &blocked {
            assert_eq!(b.len(), xv.len(), "blocked mask size");
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let is_blocked = |j: usize| blocked.as_ref().is_some_and(|b| b[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if !is_blocked(j) && *v > max {
                    max = *v;
                }
            }
            assert!(max > f64::NEG_INFINITY, "log_softmax row fully blocked");
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                if !is_blocked(j) {
                    total += (v - max).exp();
                }
            }
            let lse = max + total.ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if is_blocked(j) { 0.0 } else { *v - lse };
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x, blocked },
            &[x],
        )
    }

    /// `out[r] = x[r, cols[r]]` for `x: [rows, c]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert_eq!(xv.rows(), cols.len(), "pick needs one column per row");
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < c, "pick column out of range");
                xv.data()[r * c + j]
            })
            .collect();
        self.push(
            Tensor::from_parts(vec![cols.len()], out),
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Gradients of the scalar `root` with respect to every reachable
    /// parameter and gradient-tracking leaf.
    pub fn backward(&self, root: Var) -> Result<GradientSet, NumericsError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(NumericsError::NonScalarRoot(root_value.shape().to_vec()));
        }
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            if !node.value.is_finite() {
                return Err(NumericsError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        if self.needs(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        let mut out = GradientSet::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves
                        .insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Param(id) => {
                    out.params
                        .insert(*id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        for t in out.params.values().chain(out.leaves.values()) {
            if !t.is_finite() {
                return Err(NumericsError::NonFiniteGradient);
            }
        }
        Ok(out)
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, w } => {
                let av = self.value(*a);
                let wv = self.value(*w);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = av.rows();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, false, wv.data(), true, ga, true);
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    gemm(k, m, n, av.data(), true, g, false, gw, true);
                }
            }
            Op::MatMulNt { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), false, ga, true);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(n, m, k, g, true, av.data(), false, gb, true);
                }
            }
            Op::AddBias { x, b } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(gx, g);
                }
                let n = out.last_dim();
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gg), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gg * bb;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((d, gg), aa) in gb.iter_mut().zip(g).zip(av) {
                        *d += gg * aa;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, gg), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *d += if *xx > 0.0 { *gg } else { gg * slope };
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (((d, gg), xx), t) in gx.iter_mut().zip(g).zip(xv).zip(tanh) {
                        *d += gg * gelu_grad(*xx, *t);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, gg), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gg * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, gg), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gg * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, gg), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += gg * y;
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, gg), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gg / xx;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, ((grow, hrow), gxrow)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            dxhat[c] = grow[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hrow[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for c in 0..n {
                            gxrow[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::GatherRows { x, idx } => {
                let width = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Concat { parts } => {
                let (n, total, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut start = 0;
                for p in parts {
                    let l = self.value(*p).shape()[1];
                    if let Some(gp) = self.grad_buf(grads, *p) {
                        for s in 0..n {
                            let src = &g[(s * total + start) * d..(s * total + start + l) * d];
                            add_into(&mut gp[s * l * d..(s + 1) * l * d], src);
                        }
                    }
                    start += l;
                }
            }
            Op::Select { x, positions } => {
                let xs = self.value(*x).shape();
                let (n, l, d) = (xs[0], xs[1], xs[2]);
                let np = positions.len();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for s in 0..n {
                        for (pi, &p) in positions.iter().enumerate() {
                            add_into(
                                &mut gx[(s * l + p) * d..(s * l + p + 1) * d],
                                &g[(s * np + pi) * d..(s * np + pi + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((yrow, grow), drow) in
                        out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gg)| y * gg).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, blocked } => {
                let c = out.last_dim();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, ((yrow, grow), drow)) in out
                        .data()
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        let is_blocked = |j: usize| blocked.as_ref().is_some_and(|b| b[r * c + j]);
                        let gsum: f64 = (0..c).filter(|&j| !is_blocked(j)).map(|j| grow[j]).sum();
                        for j in 0..c {
                            if !is_blocked(j) {
                                drow[j] += grow[j] - yrow[j].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Pick { x, cols } => {
                let c = self.value(*x).last_dim();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &j) in cols.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, gg), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());

        let mut dq = self.needs(q).then(|| vec![0.0; qd.len()]);
        let mut dk = self.needs(k).then(|| vec![0.0; kd.len()]);
        let mut dv = self.needs(v).then(|| vec![0.0; vd.len()]);
        let mut dp = vec![0.0; lk];
        for s in 0..n {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let prow = &probs[((s * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(s * lq + i) * d + off..(s * lq + i) * d + off + dh];
                    let mut weighted = 0.0;
                    for j in 0..lk {
                        let vrow = &vd[(s * lk + j) * d + off..(s * lk + j) * d + off + dh];
                        dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        weighted += prow[j] * dp[j];
                    }
                    for j in 0..lk {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - weighted) * scale;
                        let qrow = (s * lq + i) * d + off;
                        let krow = (s * lk + j) * d + off;
                        if let Some(dq) = dq.as_mut() {
                            for c in 0..dh {
                                dq[qrow + c] += ds * kd[krow + c];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            for c in 0..dh {
                                dk[krow + c] += ds * qd[qrow + c];
                            }
                        }
                        if let Some(dv) = dv.as_mut() {
                            for c in 0..dh {
                                dv[krow + c] += p * go[c];
                            }
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                if let Some(target) = self.grad_buf(grads, var) {
                    add_into(target, &buf);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

/// Derivative of the tanh-form GELU given `t = tanh(inner(x))`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
