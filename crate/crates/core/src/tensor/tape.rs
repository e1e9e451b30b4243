use std::cell::{Ref, RefCell};

use super::flops::add_macs;
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Mse(Var, Var),
    Concat(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of a computation. Nodes are appended in
/// execution order, so parents always precede children.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient of `v` out.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Axis {
            op,
            axis: 1,
            shape: s.to_vec(),
        }),
    }
}

/// Rows/width view over the last axis.
fn last_axis(t: &Tensor) -> (usize, usize) {
    let w = t.shape().last().copied().unwrap_or(1);
    if w == 0 {
        (0, 0)
    } else {
        (t.numel() / w, w)
    }
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a [m,k] · bᵀ` where `b` is `[n,k]`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ · b` where `a` is `[k,m]` and `b` is `[k,n]`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log_sum_exp(x) - x[target]`, keeping precision when the target dominates.
fn nll(x: &[f64], target: usize) -> f64 {
    let (mut arg, mut m) = (0, f64::NEG_INFINITY);
    for (i, &v) in x.iter().enumerate() {
        if v > m {
            arg = i;
            m = v;
        }
    }
    let rest: f64 = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m - x[target]) + rest.ln_1p()
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k) = as_matrix("matmul", &ta)?;
            let (k2, n) = as_matrix("matmul", &tb)?;
            if k != k2 {
                return Err(shape_err("matmul", ta.shape(), tb.shape()));
            }
            add_macs((m * k * n) as u64);
            Tensor::new(vec![m, n], mm(ta.data(), tb.data(), m, k, n))?
        };
        Ok(self.push(value, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (r, c) = as_matrix("transpose", &t)?;
            let d = t.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        Ok(self.push(value, Op::Transpose(a), self.rg(&[a])))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.rg(&[a, b])))
    }

    /// Adds a `[n]` row vector to every row of `a` (last axis `n`).
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(bias));
            let (_, w) = last_axis(&ta);
            if tb.shape() != [w] {
                return Err(shape_err("add_row", ta.shape(), tb.shape()));
            }
            let mut out = ta.data().to_vec();
            for row in out.chunks_mut(w.max(1)) {
                row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::AddRow(a, bias), self.rg(&[a, bias])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).expect("same shape")
        };
        self.push(value, Op::Scale(a, c), self.rg(&[a]))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    /// Arithmetic mean over `axis`; the axis is removed from the shape.
    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (outer, len, inner) = axis_split("mean", t.shape(), axis)?;
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= len as f64);
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::Mean { x: a, axis }, self.rg(&[a])))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, xhat, rstd) = {
            let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
            let (rows, w) = last_axis(&t);
            if g.shape() != [w] || b.shape() != [w] {
                return Err(shape_err("layer_norm", t.shape(), g.shape()));
            }
            let d = t.data();
            let mut xhat = vec![0.0; d.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; d.len()];
            for r in 0..rows {
                let row = &d[r * w..(r + 1) * w];
                let mu = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..w {
                    let xh = (row[j] - mu) * rs;
                    xhat[r * w + j] = xh;
                    out[r * w + j] = xh * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| gelu(x)).collect()).expect("same shape")
        };
        self.push(value, Op::Gelu(a), self.rg(&[a]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (outer, len, inner) = axis_split("softmax", t.shape(), axis)?;
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            let mut buf = vec![0.0; len];
            let mut res = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for l in 0..len {
                        buf[l] = d[(o * len + l) * inner + i];
                    }
                    softmax_slice(&buf, &mut res);
                    for l in 0..len {
                        out[(o * len + l) * inner + i] = res[l];
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Softmax { x: a, axis }, self.rg(&[a])))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        let value = {
            let t = self.value(a);
            let (_, w) = last_axis(&t);
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(w.max(1)) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        };
        self.push(value, Op::LogSoftmax(a), self.rg(&[a]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`. `logits` is `[C]`
    /// (one target) or `[B, C]` (one target per row).
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (value, probs) = {
            let t = self.value(logits);
            let (rows, c) = last_axis(&t);
            if t.ndim() == 0 || t.ndim() > 2 || rows != targets.len() {
                return Err(shape_err("cross_entropy", t.shape(), &[targets.len()]));
            }
            let mut probs = vec![0.0; t.numel()];
            let mut loss = 0.0;
            for (r, &target) in targets.iter().enumerate() {
                if target >= c {
                    return Err(Error::Index {
                        op: "cross_entropy",
                        index: target,
                        len: c,
                    });
                }
                let row = &t.data()[r * c..(r + 1) * c];
                loss += nll(row, target);
                softmax_slice(row, &mut probs[r * c..(r + 1) * c]);
            }
            (Tensor::scalar(loss / rows as f64), probs)
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(value, op, self.rg(&[logits])))
    }

    /// Scales every row (last axis) to unit L2 norm. Zero rows are an error.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let (value, norms) = {
            let t = self.value(a);
            let (rows, w) = last_axis(&t);
            let mut out = t.data().to_vec();
            let mut norms = Vec::with_capacity(rows);
            for row in out.chunks_mut(w.max(1)) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Degenerate(format!("cannot normalize a row with norm {n}")));
                }
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            (Tensor::new(t.shape().to_vec(), out)?, norms)
        };
        Ok(self.push(value, Op::L2NormalizeRows { x: a, norms }, self.rg(&[a])))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let d = self.zip_same("mse", a, b, |x, y| (x - y) * (x - y))?;
            Tensor::scalar(d.data().iter().sum::<f64>() / d.numel().max(1) as f64)
        };
        Ok(self.push(value, Op::Mse(a, b), self.rg(&[a, b])))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
            let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = self.value(*p);
                if t.ndim() == 0 || t.shape()[1..] != tail[..] {
                    return Err(shape_err("concat", &tail, t.shape()));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(&tail);
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Concat(parts.to_vec()), self.rg(parts)))
    }

    /// Selects rows (axis 0) of `a` by index; repeats allowed.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if t.ndim() == 0 {
                return Err(Error::Axis {
                    op: "gather_rows",
                    axis: 0,
                    shape: vec![],
                });
            }
            let n = t.shape()[0];
            let w = if n == 0 { 0 } else { t.numel() / n };
            let mut data = Vec::with_capacity(index.len() * w);
            for &i in index {
                if i >= n {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: i,
                        len: n,
                    });
                }
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = index.len();
            Tensor::new(shape, data)?
        };
        let op = Op::GatherRows {
            x: a,
            index: index.to_vec(),
        };
        Ok(self.push(value, op, self.rg(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), self.rg(&[a])))
    }

    /// Multi-head scaled dot-product attention over independent sequences.
    ///
    /// `q`, `k`, `v` are `[B*T, D]` with consecutive blocks of `seq_len` rows
    /// forming one sequence; `D` is split evenly across `heads`.
    pub fn attention(&self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (value, probs) = {
            let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
            let (rows, d) = as_matrix("attention", &tq)?;
            if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
                return Err(shape_err("attention", tq.shape(), tk.shape()));
            }
            if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
                return Err(Error::invalid(format!(
                    "attention: {rows} rows, seq_len {seq_len}, width {d}, heads {heads}"
                )));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let nseq = rows / seq_len;
            let t = seq_len;
            let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
            let mut out = vec![0.0; rows * d];
            let mut probs = vec![0.0; nseq * heads * t * t];
            let mut scores = vec![0.0; t];
            for s in 0..nseq {
                for h in 0..heads {
                    let pbase = (s * heads + h) * t * t;
                    for i in 0..t {
                        let qi = &qd[(s * t + i) * d + h * dh..][..dh];
                        for j in 0..t {
                            let kj = &kd[(s * t + j) * d + h * dh..][..dh];
                            scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        }
                        softmax_slice(&scores, &mut probs[pbase + i * t..pbase + (i + 1) * t]);
                        let orow = &mut out[(s * t + i) * d + h * dh..][..dh];
                        for j in 0..t {
                            let p = probs[pbase + i * t + j];
                            let vj = &vd[(s * t + j) * d + h * dh..][..dh];
                            orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                        }
                    }
                }
            }
            add_macs((2 * nseq * t * t * d) as u64);
            (Tensor::new(vec![rows, d], out)?, probs)
        };
        let op = Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
        };
        Ok(self.push(value, op, self.rg(&[q, k, v])))
    }

    /// Reverse-mode sweep from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if wants(*a) {
                accumulate(&mut grads[a.0], &mm_nt(g, tb.data(), m, n, k));
            }
            if wants(*b) {
                accumulate(&mut grads[b.0], &mm_tn(ta.data(), g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = g[j * r + i];
                }
            }
            accumulate(&mut grads[a.0], &out);
        }
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[a.0], g);
            }
            if wants(*b) {
                accumulate(&mut grads[b.0], g);
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[a.0], g);
            }
            if wants(*b) {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                accumulate(&mut grads[b.0], &neg);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[a.0], &d);
            }
            if wants(*b) {
                let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                accumulate(&mut grads[b.0], &d);
            }
        }
        Op::AddRow(a, bias) => {
            if wants(*a) {
                accumulate(&mut grads[a.0], g);
            }
            if wants(*bias) {
                let w = val(*bias).numel();
                let mut db = vec![0.0; w];
                for row in g.chunks(w.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                accumulate(&mut grads[bias.0], &db);
            }
        }
        Op::Scale(a, c) => {
            let d: Vec<f64> = g.iter().map(|x| x * c).collect();
            accumulate(&mut grads[a.0], &d);
        }
        Op::Sum(a) => {
            let d = vec![g[0]; val(*a).numel()];
            accumulate(&mut grads[a.0], &d);
        }
        Op::Mean { x, axis } => {
            let (outer, len, inner) = axis_split("mean", val(*x).shape(), *axis).expect("checked forward");
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        d[(o * len + l) * inner + i] = g[o * inner + i] / len as f64;
                    }
                }
            }
            accumulate(&mut grads[x.0], &d);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain).data();
            let w = gv.len();
            if wants(*gain) || wants(*bias) {
                let mut dg = vec![0.0; w];
                let mut db = vec![0.0; w];
                for (grow, xrow) in g.chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        dg[j] += grow[j] * xrow[j];
                        db[j] += grow[j];
                    }
                }
                if wants(*gain) {
                    accumulate(&mut grads[gain.0], &dg);
                }
                if wants(*bias) {
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            if wants(*x) {
                let mut dx = vec![0.0; g.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let grow = &g[r * w..(r + 1) * w];
                    let xrow = &xhat[r * w..(r + 1) * w];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..w {
                        let dxh = grow[j] * gv[j];
                        mean_d += dxh;
                        mean_dx += dxh * xrow[j];
                    }
                    mean_d /= w as f64;
                    mean_dx /= w as f64;
                    for j in 0..w {
                        let dxh = grow[j] * gv[j];
                        dx[r * w + j] = rs * (dxh - mean_d - xrow[j] * mean_dx);
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
        }
        Op::Gelu(a) => {
            let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, &v)| x * gelu_grad(v)).collect();
            accumulate(&mut grads[a.0], &d);
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split("softmax", node.value.shape(), *axis).expect("checked forward");
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        d[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            accumulate(&mut grads[x.0], &d);
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let (_, w) = last_axis(&node.value);
            let mut d = vec![0.0; y.len()];
            for ((drow, grow), yrow) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                let gs: f64 = grow.iter().sum();
                for j in 0..w {
                    drow[j] = grow[j] - yrow[j].exp() * gs;
                }
            }
            accumulate(&mut grads[a.0], &d);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = probs.len() / targets.len();
            let scale = g[0] / targets.len() as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * c + t] -= scale;
            }
            accumulate(&mut grads[logits.0], &d);
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = node.value.data();
            let w = y.len() / norms.len();
            let mut d = vec![0.0; y.len()];
            for (r, n) in norms.iter().enumerate() {
                let yr = &y[r * w..(r + 1) * w];
                let gr = &g[r * w..(r + 1) * w];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    d[r * w + j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            accumulate(&mut grads[x.0], &d);
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            let k = 2.0 * g[0] / ta.len().max(1) as f64;
            let d: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect();
            if wants(*a) {
                accumulate(&mut grads[a.0], &d);
            }
            if wants(*b) {
                let neg: Vec<f64> = d.iter().map(|x| -x).collect();
                accumulate(&mut grads[b.0], &neg);
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).numel();
                if wants(*p) {
                    accumulate(&mut grads[p.0], &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::GatherRows { x, index } => {
            let t = val(*x);
            let w = if index.is_empty() { 0 } else { g.len() / index.len() };
            let mut d = vec![0.0; t.numel()];
            for (r, &i) in index.iter().enumerate() {
                for j in 0..w {
                    d[i * w + j] += g[r * w + j];
                }
            }
            accumulate(&mut grads[x.0], &d);
        }
        Op::Reshape(a) => accumulate(&mut grads[a.0], g),
        Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
        } => {
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let d = val(*q).shape()[1];
            let (t, nh) = (*seq_len, *heads);
            let dh = d / nh;
            let scale = 1.0 / (dh as f64).sqrt();
            let nseq = qd.len() / (t * d);
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut dp = vec![0.0; t];
            add_macs((4 * nseq * t * t * d) as u64);
            for s in 0..nseq {
                for h in 0..nh {
                    let pbase = (s * nh + h) * t * t;
                    for i in 0..t {
                        let row = s * t + i;
                        let go = &g[row * d + h * dh..][..dh];
                        let p = &probs[pbase + i * t..pbase + (i + 1) * t];
                        for j in 0..t {
                            let vj = &vd[(s * t + j) * d + h * dh..][..dh];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let dvj = &mut dv[(s * t + j) * d + h * dh..][..dh];
                            dvj.iter_mut().zip(go).for_each(|(x, y)| *x += p[j] * y);
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..t {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            let kj = &kd[(s * t + j) * d + h * dh..][..dh];
                            let qi = &qd[row * d + h * dh..][..dh];
                            let dqi = &mut dq[row * d + h * dh..][..dh];
                            dqi.iter_mut().zip(kj).for_each(|(x, y)| *x += ds * y);
                            let dkj = &mut dk[(s * t + j) * d + h * dh..][..dh];
                            dkj.iter_mut().zip(qi).for_each(|(x, y)| *x += ds * y);
                        }
                    }
                }
            }
            if wants(*q) {
                accumulate(&mut grads[q.0], &dq);
            }
            if wants(*k) {
                accumulate(&mut grads[k.0], &dk);
            }
            if wants(*v) {
                accumulate(&mut grads[v.0], &dv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::new();
        let id = tape.constant(m(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(m(&[vec![5.0], vec![6.0]]));
        let same = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(a).data());
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[17.0, 39.0]);
        assert_eq!(tape.shape(p), vec![2, 1]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let tape = Tape::new();
        let a = tape.leaf(m(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.0, 2.0]]));
        let b = tape.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let loss = tape.sum(tape.matmul(a, b).unwrap());
        let g = tape.backward(loss).unwrap();
        // ones[2x2] · bᵀ: row sums of b
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 3]));
        let s = tape.softmax(z, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.softmax(x, 0).unwrap();
        let expected = [0.03206, 0.08714, 0.23688, 0.64391];
        for (v, e) in tape.value(s).data().iter().zip(expected) {
            assert!((v - e).abs() < 5e-6, "{v} vs {e}");
        }
        let shifted = tape.constant(Tensor::vector(vec![101.0, 102.0, 103.0, 104.0]));
        let s2 = tape.softmax(shifted, 0).unwrap();
        assert!(tape.value(s).max_abs_diff(&tape.value(s2)) < 1e-15);
    }

    #[test]
    fn softmax_over_inner_axis() {
        let tape = Tape::new();
        let x = tape.constant(m(&[vec![1.0, 5.0], vec![1.0, -5.0]]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        assert!((v.data()[0] - 0.5).abs() < 1e-15);
        assert!((v.data()[1] + v.data()[3] - 1.0).abs() < 1e-15);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::vector(vec![0.3; 7]));
        let l = tape.cross_entropy(u, &[4]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-14);

        let x = tape.constant(Tensor::vector(vec![10.0, -10.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((tape.value(l).item() - expected).abs() < 1e-20);
        assert!((tape.value(l).item() - 2.06e-9).abs() < 1e-11);

        assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn normalizing_zero_row_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.l2_normalize_rows(a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(tape.add(sq, a).unwrap());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0, 7.0]);
    }
}
