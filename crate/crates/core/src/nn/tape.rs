//! Eager reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every op evaluates immediately and records how to propagate gradients.
//! Inference runs on the same tape with gradients disabled, so the forward
//! code of every model exists exactly once.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{dim_err, ConfuError, Result};
use crate::nn::mask::AttentionMask;
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_t, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Silu(usize),
    RmsNorm { x: usize, gain: usize, eps: S },
    Softmax(usize),
    LogSoftmax(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SelectCols { x: usize, idx: Vec<Vec<usize>> },
    NormalizeRows(usize),
    MixRows { w: usize, experts: usize, idx: Vec<Vec<usize>> },
    PickCols { x: usize, idx: Vec<usize> },
    KlRows { logq: usize, p: Vec<S> },
    Sum(usize),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    params: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    by_node: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter reached by the loss.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<S>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.by_node[node].clone().map(|g| (id, g)))
            .collect()
    }
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A tape for pure evaluation.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, rows: usize, cols: usize, data: Vec<S>, op: Op<S>, inputs: &[usize]) -> Var {
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let t = Tensor::matrix(rows, cols, data).expect("op produced consistent shape");
        self.push(Cow::Owned(t), op, needs)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A constant borrowed for the tape's lifetime.
    pub fn constant_ref(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A free input whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A parameter; it only carries gradient when its group is trainable.
    /// Each parameter appears on a tape at most once.
    pub fn param(&mut self, store: &'a ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.owned(m, n, out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ`; weights are stored `[out, in]` so this is a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(dim_err!("matmul_t {m}x{k} by ({n}x{k2})ᵀ"));
        }
        let out = matmul_t(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.owned(m, n, out, Op::MatMulT(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(dim_err!("add {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.owned(m, n, out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(dim_err!("add_row {:?} and {:?}", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let out = self.value(a).data().chunks(n).flat_map(|c| c.iter().zip(r).map(|(&x, &y)| x + y)).collect();
        Ok(self.owned(m, n, out, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(dim_err!("mul {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.owned(m, n, out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        self.owned(m, n, out, Op::Scale(a.0, c), &[a.0])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| x / (S::one() + (-x).exp())).collect();
        self.owned(m, n, out, Op::Silu(a.0), &[a.0])
    }

    /// Row-wise RMS normalization with a learned `[1, n]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) {
            return Err(dim_err!("rms_norm gain {:?} for width {n}", self.shape(gain)));
        }
        let g = self.value(gain).data();
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let r = rms_inv(row, eps);
            out.extend(row.iter().zip(g).map(|(&v, &gj)| v * r * gj));
        }
        Ok(self.owned(m, n, out, Op::RmsNorm { x: x.0, gain: gain.0, eps }, &[x.0, gain.0]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            out.extend(crate::tensor::softmax(row));
        }
        self.owned(m, n, out, Op::Softmax(x.0), &[x.0])
    }

    /// Row-wise softmax over allowed entries only. Masked entries are
    /// excluded before the max is taken and come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (m, n) = self.shape(x);
        if (mask.rows(), mask.cols()) != (m, n) {
            return Err(dim_err!("mask {}x{} for scores {m}x{n}", mask.rows(), mask.cols()));
        }
        mask.validate()?;
        let mut out = vec![S::zero(); m * n];
        let data = self.value(x).data();
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let allow = mask.row(i);
            let mut max = S::neg_infinity();
            for j in 0..n {
                if allow[j] && row[j] > max {
                    max = row[j];
                }
            }
            let mut sum = S::zero();
            for j in 0..n {
                if allow[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if allow[j] {
                    out[i * n + j] /= sum;
                }
            }
        }
        // Softmax backward only needs the output, so the same op serves both.
        Ok(self.owned(m, n, out, Op::Softmax(x.0), &[x.0]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.owned(m, n, out, Op::LogSoftmax(x.0), &[x.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| dim_err!("concat of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return Err(dim_err!("concat_cols with differing row counts"));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.owned(m, n, out, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| dim_err!("concat of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return Err(dim_err!("concat_rows with differing widths"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.owned(m, n, out, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(dim_err!("slice {start}..{} of width {n}", start + len));
        }
        let out = self.value(x).data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.owned(m, len, out, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    /// Row gather (embedding lookup); repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(dim_err!("row index {bad} out of {m}"));
        }
        let out = idx.iter().flat_map(|&i| self.value(x).row(i).iter().copied()).collect();
        Ok(self.owned(idx.len(), n, out, Op::GatherRows { x: x.0, idx: idx.to_vec() }, &[x.0]))
    }

    /// Per-row column selection: `out[i][j] = x[i][idx[i][j]]`.
    pub fn select_cols(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.shape(x);
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != m || idx.iter().any(|r| r.len() != k || r.iter().any(|&j| j >= n)) {
            return Err(dim_err!("select_cols indices do not fit {m}x{n}"));
        }
        let out = idx.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&j| (i, j))).map(|(i, j)| self.value(x).at(i, j)).collect();
        Ok(self.owned(m, k, out, Op::SelectCols { x: x.0, idx: idx.to_vec() }, &[x.0]))
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|r| {
                let s: S = r.iter().copied().sum();
                r.iter().map(move |&v| v / s)
            })
            .collect();
        self.owned(m, n, out, Op::NormalizeRows(x.0), &[x.0])
    }

    /// `out[i] = Σ_j w[i][j] · experts[idx[i][j]]`.
    pub fn mix_rows(&mut self, w: Var, experts: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (m, k) = self.shape(w);
        let (e, d) = self.shape(experts);
        if idx.len() != m || idx.iter().any(|r| r.len() != k || r.iter().any(|&j| j >= e)) {
            return Err(dim_err!("mix_rows indices do not fit weights {m}x{k} / experts {e}"));
        }
        let mut out = vec![S::zero(); m * d];
        for i in 0..m {
            for (j, &ex) in idx[i].iter().enumerate() {
                let wij = self.value(w).at(i, j);
                let er = self.value(experts).row(ex);
                for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(er) {
                    *o += wij * v;
                }
            }
        }
        Ok(self.owned(m, d, out, Op::MixRows { w: w.0, experts: experts.0, idx: idx.to_vec() }, &[w.0, experts.0]))
    }

    /// `out[i] = x[i][idx[i]]`, shape `[m, 1]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(dim_err!("pick_cols indices do not fit {m}x{n}"));
        }
        let out = idx.iter().enumerate().map(|(i, &j)| self.value(x).at(i, j)).collect();
        Ok(self.owned(m, 1, out, Op::PickCols { x: x.0, idx: idx.to_vec() }, &[x.0]))
    }

    /// Per-row `KL(p ‖ q)` from constant target probabilities `p` and draft
    /// log-probabilities `logq`, shape `[m, 1]`. `p` is floored at `floor`
    /// inside the logarithm.
    pub fn kl_rows(&mut self, p: &Tensor<S>, logq: Var, floor: S) -> Result<Var> {
        let (m, n) = self.shape(logq);
        if (p.rows(), p.cols()) != (m, n) {
            return Err(dim_err!("kl target {}x{} vs {m}x{n}", p.rows(), p.cols()));
        }
        let lq = self.value(logq).data();
        let out = (0..m)
            .map(|i| {
                let mut acc = S::zero();
                for j in 0..n {
                    let pj = p.data()[i * n + j];
                    if pj > S::zero() {
                        acc += pj * (pj.max(floor).ln() - lq[i * n + j]);
                    }
                }
                acc
            })
            .collect();
        Ok(self.owned(m, 1, out, Op::KlRows { logq: logq.0, p: p.data().to_vec() }, &[logq.0]))
    }

    /// Sum of all elements, shape `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.owned(1, 1, vec![s], Op::Sum(x.0), &[x.0])
    }

    /// Multi-head scaled dot-product attention of `q [n, d]` over
    /// `k, v [m, d]` under `mask [n, m]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, n_heads: usize) -> Result<Var> {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        if dk != d || self.shape(v) != (m, d) {
            return Err(dim_err!("attention q {n}x{d}, k {m}x{dk}, v {:?}", self.shape(v)));
        }
        if (mask.rows(), mask.cols()) != (n, m) {
            return Err(dim_err!("mask {}x{} for attention {n}x{m}", mask.rows(), mask.cols()));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(dim_err!("width {d} not divisible into {n_heads} heads"));
        }
        let hd = d / n_heads;
        let scale = S::one() / S::lit(hd as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (q, k, v)
            } else {
                (self.slice_cols(q, h * hd, hd)?, self.slice_cols(k, h * hd, hd)?, self.slice_cols(v, h * hd, hd)?)
            };
            let scores = self.matmul_t(qh, kh)?;
            let scores = self.scale(scores, scale);
            let probs = self.masked_softmax(scores, mask)?;
            heads.push(self.matmul(probs, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            self.concat_cols(&heads)
        }
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(ConfuError::State("backward without a recorded forward pass".into()));
        }
        if !self.grad_enabled {
            return Err(ConfuError::State("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(ConfuError::State(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn propagate(&self, i: usize, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let (m, n) = (node.value.rows(), node.value.cols());
        let needs = |j: usize| self.nodes[j].needs_grad;
        let val = |j: usize| &*self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let k = val(*a).cols();
                if needs(*a) {
                    add_into(grads, *a, &matmul_t(dy, val(*b).data(), m, n, k));
                }
                if needs(*b) {
                    add_into(grads, *b, &matmul_tn(val(*a).data(), dy, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let k = val(*a).cols();
                if needs(*a) {
                    add_into(grads, *a, &matmul(dy, val(*b).data(), m, n, k));
                }
                if needs(*b) {
                    add_into(grads, *b, &matmul_tn(dy, val(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(grads, *a, dy);
                }
                if needs(*b) {
                    add_into(grads, *b, dy);
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    add_into(grads, *a, dy);
                }
                if needs(*r) {
                    let mut g = vec![S::zero(); n];
                    for row in dy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    add_into(grads, *r, &g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let g: Vec<S> = dy.iter().zip(val(*b).data()).map(|(&d, &x)| d * x).collect();
                    add_into(grads, *a, &g);
                }
                if needs(*b) {
                    let g: Vec<S> = dy.iter().zip(val(*a).data()).map(|(&d, &x)| d * x).collect();
                    add_into(grads, *b, &g);
                }
            }
            Op::Scale(a, c) => {
                let g: Vec<S> = dy.iter().map(|&d| d * *c).collect();
                add_into(grads, *a, &g);
            }
            Op::Silu(a) => {
                let g: Vec<S> = dy
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&d, &x)| {
                        let s = S::one() / (S::one() + (-x).exp());
                        d * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                add_into(grads, *a, &g);
            }
            Op::RmsNorm { x, gain, eps } => {
                let xs = val(*x).data();
                let g = val(*gain).data();
                let nf = S::lit(n as f64);
                let mut dx = vec![S::zero(); m * n];
                let mut dg = vec![S::zero(); n];
                for r in 0..m {
                    let xr = &xs[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let inv = rms_inv(xr, *eps);
                    let mut proj = S::zero();
                    for j in 0..n {
                        proj += dr[j] * g[j] * xr[j];
                        dg[j] += dr[j] * xr[j] * inv;
                    }
                    let c = proj * inv * inv * inv / nf;
                    for j in 0..n {
                        dx[r * n + j] = dr[j] * g[j] * inv - xr[j] * c;
                    }
                }
                if needs(*x) {
                    add_into(grads, *x, &dx);
                }
                if needs(*gain) {
                    add_into(grads, *gain, &dg);
                }
            }
            Op::Softmax(a) => {
                let mut g = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let dot: S = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                add_into(grads, *a, &g);
            }
            Op::LogSoftmax(a) => {
                let mut g = vec![S::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let total: S = dr.iter().copied().sum();
                    for j in 0..n {
                        g[r * n + j] = dr[j] - yr[j].exp() * total;
                    }
                }
                add_into(grads, *a, &g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let g: Vec<S> = dy.chunks(n).flat_map(|r| r[offset..offset + w].iter().copied()).collect();
                        add_into(grads, p, &g);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        add_into(grads, p, &dy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = val(*x).cols();
                let mut g = vec![S::zero(); val(*x).len()];
                for r in 0..m {
                    g[r * w + start..r * w + start + n].copy_from_slice(&dy[r * n..(r + 1) * n]);
                }
                add_into(grads, *x, &g);
            }
            Op::GatherRows { x, idx } => {
                let mut g = vec![S::zero(); val(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        g[src * n + j] += dy[r * n + j];
                    }
                }
                add_into(grads, *x, &g);
            }
            Op::SelectCols { x, idx } => {
                let w = val(*x).cols();
                let mut g = vec![S::zero(); val(*x).len()];
                for (r, cols) in idx.iter().enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        g[r * w + c] += dy[r * n + j];
                    }
                }
                add_into(grads, *x, &g);
            }
            Op::NormalizeRows(a) => {
                let xs = val(*a).data();
                let mut g = vec![S::zero(); m * n];
                for r in 0..m {
                    let s: S = xs[r * n..(r + 1) * n].iter().copied().sum();
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let dot: S = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = (dr[j] - dot) / s;
                    }
                }
                add_into(grads, *a, &g);
            }
            Op::MixRows { w, experts, idx } => {
                let d = n;
                let k = val(*w).cols();
                if needs(*w) {
                    let mut g = vec![S::zero(); m * k];
                    for r in 0..m {
                        for (j, &e) in idx[r].iter().enumerate() {
                            g[r * k + j] = crate::tensor::dot(&dy[r * d..(r + 1) * d], val(*experts).row(e));
                        }
                    }
                    add_into(grads, *w, &g);
                }
                if needs(*experts) {
                    let mut g = vec![S::zero(); val(*experts).len()];
                    for r in 0..m {
                        for (j, &e) in idx[r].iter().enumerate() {
                            let wij = val(*w).at(r, j);
                            for c in 0..d {
                                g[e * d + c] += wij * dy[r * d + c];
                            }
                        }
                    }
                    add_into(grads, *experts, &g);
                }
            }
            Op::PickCols { x, idx } => {
                let w = val(*x).cols();
                let mut g = vec![S::zero(); val(*x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    g[r * w + c] += dy[r];
                }
                add_into(grads, *x, &g);
            }
            Op::KlRows { logq, p } => {
                let w = val(*logq).cols();
                let g: Vec<S> = p.iter().enumerate().map(|(e, &pv)| -pv * dy[e / w]).collect();
                add_into(grads, *logq, &g);
            }
            Op::Sum(a) => {
                let g = vec![dy[0]; val(*a).len()];
                add_into(grads, *a, &g);
            }
        }
    }
}

fn rms_inv<S: Scalar>(row: &[S], eps: S) -> S {
    let ms: S = row.iter().map(|&v| v * v).sum::<S>() / S::lit(row.len() as f64);
    S::one() / (ms + eps).sqrt()
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
