//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in creation order, so the tape is topologically sorted
//! by construction and backward is a single reverse sweep. A tape lives for
//! one forward pass; parameters are re-registered on every step.

use std::sync::Arc;

use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-query key row indices for [`Tape::attention`].
pub type KeySets = Arc<Vec<Vec<usize>>>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `sqrt(2/pi)` and the cubic coefficient of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kh: usize,
    kw: usize,
    depthwise: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    ConcatLast(Vec<Var>),
    NarrowLast {
        x: Var,
        offset: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Conv2dSame {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        keys: KeySets,
        offsets: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (an input).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the backward root w.r.t. `v`; zeros if `v` did not
    /// influence the root or backward has not run.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.as_ref().and_then(|g| g[v.0].clone()) {
            Some(data) => Tensor::new(&shape, data).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Drops accumulated gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over all rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || bv.numel() != xv.last_dim() {
            return Err(Error::dim(format!(
                "add_row: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let n = bv.numel();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let ng = self.needs(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("mul: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scaled(factor);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x · wᵀ (+ bias)` for `x[n×in]`, `w[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose_last_two(w)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Swaps the two trailing axes of a rank-2 tensor.
    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Row-wise softmax over the last axis, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Normalises each last-axis vector to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.numel() as f64);
        let ng = self.needs(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_last_dim of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat_last_dim: {:?} vs {:?}",
                    self.shape(*first),
                    s
                )));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), ng))
    }

    /// Columns `offset..offset + width` of the last axis.
    pub fn narrow_last_dim(&mut self, x: Var, offset: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if width == 0 || offset + width > d {
            return Err(Error::dim(format!(
                "narrow_last_dim: [{offset}, {}) out of last extent {d}",
                offset + width
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[offset..offset + width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::NarrowLast { x, offset }, ng))
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_last_dim(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if total != self.value(x).last_dim() {
            return Err(Error::dim(format!(
                "split_last_dim: widths {widths:?} do not sum to {}",
                self.value(x).last_dim()
            )));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.narrow_last_dim(x, offset, w)?);
            offset += w;
        }
        Ok(out)
    }

    /// Stacks row-matrices vertically; result is `[Σ rows × d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let d = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != d {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} vs {:?}",
                    self.shape(*first),
                    pv.shape()
                )));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        let out = Tensor::new(&[rows, d], data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects rows by index (repeats allowed); result is `[index.len() × d]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        if index.is_empty() {
            return Err(Error::dim("gather_rows with empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(Error::dim(format!("gather_rows: row {i} of {rows}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[index.len(), d], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Stride-1 2-D convolution with zero "same" padding on channels-last
    /// input `x[B×H×W×C]`.
    ///
    /// A `[C×kh×kw]` kernel is applied depthwise; a `[C×C×kh×kw]` kernel
    /// (output channel first) mixes channels. The output pixel `(i, j)`
    /// reads input rows `i - (kh-1)/2 ..` and columns `j - (kw-1)/2 ..`, so
    /// even kernels pad one extra row/column at the bottom/right.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let xs = xv.shape();
        let ks = kv.shape();
        if xs.len() != 4 {
            return Err(Error::dim(format!("conv2d_same: input {xs:?} is not [B,H,W,C]")));
        }
        let channels = xs[3];
        let geom = match ks {
            [c, kh, kw] if *c == channels => (kh, kw, true),
            [co, ci, kh, kw] if *co == channels && *ci == channels => (kh, kw, false),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d_same: kernel {ks:?} incompatible with input {xs:?}"
                )))
            }
        };
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            channels,
            kh: *geom.0,
            kw: *geom.1,
            depthwise: geom.2,
        };
        let out = conv_forward(xv.data(), kv.data(), geom);
        let out = Tensor::new(xs, out)?;
        let ng = self.needs(&[x, kernel]);
        Ok(self.push(out, Op::Conv2dSame { x, kernel, geom }, ng))
    }

    /// Multi-head scaled dot-product attention with an explicit key set per
    /// query row.
    ///
    /// `q`, `k`, `v` are `[rows×d]`; head `h` uses columns
    /// `h·d_h .. (h+1)·d_h`. Query `i` attends to rows `keys[i]` of `k`/`v`
    /// with scores `scale·⟨q_i, k_j⟩ + score_offset`. Output is the head
    /// outputs concatenated, `[queries×d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: KeySets,
        score_offset: f64,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.last_dim();
        if qv.rank() != 2 || kv.shape() != vv.shape() || kv.last_dim() != d {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {d}")));
        }
        let nq = qv.rows();
        let nk = kv.rows();
        if keys.len() != nq {
            return Err(Error::dim(format!(
                "attention: {} key sets for {nq} queries",
                keys.len()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut offsets = Vec::with_capacity(nq);
        let mut total = 0;
        for set in keys.iter() {
            if set.is_empty() {
                return Err(Error::Contract("attention query with empty key set".into()));
            }
            if let Some(&bad) = set.iter().find(|&&j| j >= nk) {
                return Err(Error::dim(format!("attention key {bad} of {nk}")));
            }
            offsets.push(total);
            total += set.len();
        }
        let mut probs = vec![0.0; total * heads];
        let mut out = vec![0.0; nq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for (i, set) in keys.iter().enumerate() {
            let len = set.len();
            for h in 0..heads {
                let base = offsets[i] * heads + h * len;
                let p = &mut probs[base..base + len];
                let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                for (slot, &j) in p.iter_mut().zip(set) {
                    let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                    *slot = scale * dot(qi, kj) + score_offset;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&a, &j) in p.iter().zip(set) {
                    let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
            }
        }
        let out = Tensor::new(&[nq, d], out)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                offsets,
                probs,
            },
            ng,
        ))
    }

    /// Head-averaged attention probabilities of an attention node, one row
    /// per query aligned with that query's key set.
    pub fn attention_weights(&self, node: Var) -> Option<(KeySets, Vec<Vec<f64>>)> {
        match &self.nodes[node.0].op {
            Op::Attention {
                heads,
                keys,
                offsets,
                probs,
                ..
            } => {
                let rows = keys
                    .iter()
                    .enumerate()
                    .map(|(i, set)| {
                        let len = set.len();
                        let mut avg = vec![0.0; len];
                        for h in 0..*heads {
                            let base = offsets[i] * heads + h * len;
                            for (a, &p) in avg.iter_mut().zip(&probs[base..base + len]) {
                                *a += p;
                            }
                        }
                        avg.iter_mut().for_each(|a| *a /= *heads as f64);
                        avg
                    })
                    .collect();
                Some((Arc::clone(keys), rows))
            }
            _ => None,
        }
    }

    /// Mean cross-entropy of row-wise softmax(`logits[B×C]`) against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?} for {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let c = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Contract(format!("label {y} with {c} classes")));
            }
            let row = &mut probs[r * c..(r + 1) * c];
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Accumulates `∂root/∂node` into every node that can reach `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if self.grads.is_some() {
            return Err(Error::State(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |dst| axpy(dst, g, 1.0));
                self.acc(grads, *b, |dst| axpy(dst, g, 1.0));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |dst| axpy(dst, g, 1.0));
                self.acc(grads, *b, |dst| {
                    let n = dst.len();
                    for (i, &gi) in g.iter().enumerate() {
                        dst[i % n] += gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |dst| {
                    for ((d, &gi), &y) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                self.acc(grads, *b, |dst| {
                    for ((d, &gi), &x) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(x, f) => self.acc(grads, *x, |dst| axpy(dst, g, *f)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G·Bᵀ
                self.acc(grads, *a, |dst| {
                    for i in 0..m {
                        for p in 0..k {
                            dst[i * k + p] += dot(&g[i * n..(i + 1) * n], bv.row(p));
                        }
                    }
                });
                // dB = Aᵀ·G
                self.acc(grads, *b, |dst| {
                    let at = av.transpose().expect("rank 2");
                    matmul_into(at.data(), g, dst, k, m, n);
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                self.acc(grads, *x, |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |dst| axpy(dst, g, 1.0)),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.last_dim();
                self.acc(grads, *x, |dst| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            dst[r * c + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                self.acc(grads, *x, |dst| {
                    let mut dxhat = vec![0.0; d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, h);
                        for j in 0..d {
                            dst[r * d + j] +=
                                inv / d as f64 * (d as f64 * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gain, |dst| {
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        dst[i % d] += gi * h;
                    }
                });
                self.acc(grads, *bias, |dst| {
                    for (i, &gi) in g.iter().enumerate() {
                        dst[i % d] += gi;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dst| {
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |dst| dst.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |dst| dst.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::ConcatLast(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |dst| {
                        for r in 0..rows {
                            for j in 0..w {
                                dst[r * w + j] += g[r * width + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::NarrowLast { x, offset } => {
                let d = self.value(*x).last_dim();
                let w = node.value.last_dim();
                self.acc(grads, *x, |dst| {
                    for r in 0..node.value.rows() {
                        for j in 0..w {
                            dst[r * d + offset + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |dst| axpy(dst, &g[start..start + n], 1.0));
                    start += n;
                }
            }
            Op::GatherRows { x, index } => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |dst| {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut dst[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::Conv2dSame { x, kernel, geom } => {
                let (xv, kv) = (self.value(*x).data(), self.value(*kernel).data());
                self.acc(grads, *x, |dst| conv_backward_input(g, kv, dst, *geom));
                self.acc(grads, *kernel, |dst| conv_backward_kernel(g, xv, dst, *geom));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                offsets,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.last_dim();
                let dh = d / heads;
                let mut dq = vec![0.0; qv.numel()];
                let mut dk = vec![0.0; kv.numel()];
                let mut dv = vec![0.0; vv.numel()];
                let mut ds = Vec::new();
                for (i, set) in keys.iter().enumerate() {
                    let len = set.len();
                    for h in 0..*heads {
                        let base = offsets[i] * heads + h * len;
                        let p = &probs[base..base + len];
                        let cols = h * dh..(h + 1) * dh;
                        let gi = &g[i * d..(i + 1) * d][cols.clone()];
                        ds.clear();
                        for (&a, &j) in p.iter().zip(set) {
                            let vj = &vv.row(j)[cols.clone()];
                            ds.push(dot(gi, vj));
                            axpy(&mut dv[j * d..(j + 1) * d][cols.clone()], gi, a);
                        }
                        let inner = dot(p, &ds);
                        let qi = &qv.row(i)[cols.clone()];
                        for ((&a, &j), s) in p.iter().zip(set).zip(ds.iter_mut()) {
                            *s = a * (*s - inner) * scale;
                            let kj = &kv.row(j)[cols.clone()];
                            axpy(&mut dq[i * d..(i + 1) * d][cols.clone()], kj, *s);
                            axpy(&mut dk[j * d..(j + 1) * d][cols.clone()], qi, *s);
                        }
                    }
                }
                self.acc(grads, *q, |dst| axpy(dst, &dq, 1.0));
                self.acc(grads, *k, |dst| axpy(dst, &dk, 1.0));
                self.acc(grads, *v, |dst| axpy(dst, &dv, 1.0));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let b = labels.len() as f64;
                self.acc(grads, *logits, |dst| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dst[r * c + j] += g[0] * (probs[r * c + j] - onehot) / b;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Visits every (output pixel, kernel tap, input pixel) triple that lies
/// inside the image.
fn conv_taps(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeom {
        batch,
        height,
        width,
        kh,
        kw,
        ..
    } = geom;
    let (top, left) = ((kh - 1) / 2, (kw - 1) / 2);
    for b in 0..batch {
        for i in 0..height {
            for j in 0..width {
                let out_pix = (b * height + i) * width + j;
                for u in 0..kh {
                    let Some(ii) = (i + u).checked_sub(top).filter(|&r| r < height) else {
                        continue;
                    };
                    for w in 0..kw {
                        let Some(jj) = (j + w).checked_sub(left).filter(|&c| c < width) else {
                            continue;
                        };
                        f(out_pix, u * kw + w, (b * height + ii) * width + jj);
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], k: &[f64], geom: ConvGeom) -> Vec<f64> {
    let c = geom.channels;
    let taps = geom.kh * geom.kw;
    let mut out = vec![0.0; x.len()];
    conv_taps(geom, |o, tap, i| {
        let (xo, xi) = (o * c, i * c);
        if geom.depthwise {
            for ch in 0..c {
                out[xo + ch] += k[ch * taps + tap] * x[xi + ch];
            }
        } else {
            for co in 0..c {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += k[(co * c + ci) * taps + tap] * x[xi + ci];
                }
                out[xo + co] += acc;
            }
        }
    });
    out
}

fn conv_backward_input(g: &[f64], k: &[f64], dst: &mut [f64], geom: ConvGeom) {
    let c = geom.channels;
    let taps = geom.kh * geom.kw;
    conv_taps(geom, |o, tap, i| {
        if geom.depthwise {
            for ch in 0..c {
                dst[i * c + ch] += k[ch * taps + tap] * g[o * c + ch];
            }
        } else {
            for co in 0..c {
                let go = g[o * c + co];
                for ci in 0..c {
                    dst[i * c + ci] += k[(co * c + ci) * taps + tap] * go;
                }
            }
        }
    });
}

fn conv_backward_kernel(g: &[f64], x: &[f64], dst: &mut [f64], geom: ConvGeom) {
    let c = geom.channels;
    let taps = geom.kh * geom.kw;
    conv_taps(geom, |o, tap, i| {
        if geom.depthwise {
            for ch in 0..c {
                dst[ch * taps + tap] += g[o * c + ch] * x[i * c + ch];
            }
        } else {
            for co in 0..c {
                let go = g[o * c + co];
                for ci in 0..c {
                    dst[(co * c + ci) * taps + tap] += go * x[i * c + ci];
                }
            }
        }
    });
}
