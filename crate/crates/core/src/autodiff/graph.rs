use std::borrow::Cow;

use rand::Rng;

use super::{AutodiffError, ParamId, ParamStore, Scalar, Strided, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(outer, len, inner)` decomposition of a shape around one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Exp,
    Log,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// `b` is broadcast over `a` with period `b.numel()`.
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Huber {
        x: Var,
        sigma: F,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: Axis,
    },
    LogSoftmax {
        x: Var,
        axis: Axis,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
        end: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    grad: bool,
}

/// Tape of tensor operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward walks it in reverse. Parameters are
/// borrowed from their [`ParamStore`] rather than copied.
pub struct Graph<'p, F: Scalar> {
    nodes: Vec<Node<'p, F>>,
    track_params: bool,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// 8-lane dot product; fixed association order keeps results reproducible.
#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let o = c * 8;
        for l in 0..8 {
            acc[l] += a[o + l] * b[o + l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(GELU_K);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// Graph whose parameters are recorded as constants; use for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<F>>, op: Op<F>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<F>, op: Op<F>, grad: bool) -> Var {
        self.push(Cow::Owned(value), op, grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Leaf holding data that receives a gradient when `requires_grad`.
    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.owned(t, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.input(t, false)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, store: &'p ParamStore<F>, id: ParamId) -> Var {
        self.push(
            Cow::Borrowed(store.get(id)),
            Op::Leaf { param: Some(id) },
            self.track_params,
        )
    }

    /// Borrowed parameter that does not receive gradients.
    pub fn frozen(&mut self, store: &'p ParamStore<F>, id: ParamId) -> Var {
        self.push(Cow::Borrowed(store.get(id)), Op::Leaf { param: None }, false)
    }

    /// Copy of `x` with the gradient path cut (`sg[x]`).
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// `a[.., k] x b[k, n]`, or `a x b^T` with `b[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.cols();
        if tb.rank() != 2 {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if kb != k {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let m = ta.rows();
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![F::zero(); m * n];
        let b_view = if trans_b { Strided::transposed(bd, k) } else { Strided::rows(bd, n) };
        F::gemm(m, k, n, Strided::rows(ad, k), b_view, F::zero(), &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("rank") = n;
        let grad = self.g(a) || self.g(b);
        Ok(self.owned(
            Tensor::new(shape, out)?,
            Op::MatMul { a, b, trans_b },
            grad,
        ))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let ok = tb.numel() == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(shape_err(name, &[sa, sb]));
        }
        let p = tb.numel();
        let bd = tb.data();
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(p) {
            match kind {
                Binary::Add => chunk.iter_mut().zip(bd).for_each(|(x, &y)| *x += y),
                Binary::Sub => chunk.iter_mut().zip(bd).for_each(|(x, &y)| *x -= y),
                Binary::Mul => chunk.iter_mut().zip(bd).for_each(|(x, &y)| *x *= y),
            }
        }
        let shape = sa.to_vec();
        let grad = self.g(a) || self.g(b);
        Ok(self.owned(Tensor::new(shape, out)?, Op::Binary { kind, a, b }, grad))
    }

    /// Elementwise sum; `b` may be a scalar or match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        let grad = self.g(x);
        self.owned(
            Tensor::new(shape, data).expect("same shape"),
            Op::Scale { x, c },
            grad,
        )
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Relu => v.max(F::zero()),
                Unary::Gelu => gelu(v),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
            })
            .collect();
        let shape = t.shape().to_vec();
        let grad = self.g(x);
        self.owned(
            Tensor::new(shape, data).expect("same shape"),
            Op::Unary { x, kind },
            grad,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// Elementwise Huber penalty with threshold `sigma`.
    pub fn huber(&mut self, x: Var, sigma: F) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&r| huber(r, sigma)).collect();
        let shape = t.shape().to_vec();
        let grad = self.g(x);
        self.owned(
            Tensor::new(shape, data).expect("same shape"),
            Op::Huber { x, sigma },
            grad,
        )
    }

    /// Gathers rows of `table[V, d]`; the result has shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(shape_err("embedding_lookup", &[t.shape(), &[ids.len()]]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "embedding_lookup",
                index: bad,
                len: v,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let grad = self.g(table);
        Ok(self.owned(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            grad,
        ))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<Axis, AutodiffError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(shape_err(op, &[s, &[axis]]));
        }
        Ok(Axis::of(s, axis))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let ax = self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for_each_lane(ax, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for i in idx.clone() {
                let e = (out[i] - m).exp();
                out[i] = e;
                s += e;
            }
            for i in idx {
                out[i] = out[i] / s;
            }
        });
        let shape = t.shape().to_vec();
        let grad = self.g(x);
        Ok(self.owned(Tensor::new(shape, out)?, Op::Softmax { x, axis: ax }, grad))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let ax = self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for_each_lane(ax, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(F::neg_infinity(), F::max);
            let s: F = idx.clone().map(|i| (out[i] - m).exp()).sum();
            let lse = m + s.ln();
            for i in idx {
                out[i] = out[i] - lse;
            }
        });
        let shape = t.shape().to_vec();
        let grad = self.g(x);
        Ok(self.owned(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis: ax }, grad))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let d = t.cols();
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.shape() != [d] || bt.shape() != [d] {
            return Err(shape_err("layer_norm", &[t.shape(), gt.shape(), bt.shape()]));
        }
        let rows = t.rows();
        let mut out = vec![F::zero(); t.numel()];
        let mut xhat = vec![F::zero(); t.numel()];
        let mut rstd = vec![F::zero(); rows];
        let df = F::of(d as f64);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gt.data()[j] + bt.data()[j];
            }
        }
        let shape = t.shape().to_vec();
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        Ok(self.owned(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            grad,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| shape_err("concat", &[]))?;
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first, &[axis]]));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.shape(q)).collect();
                return Err(shape_err("concat", &shapes));
            }
            lens.push(s[axis]);
        }
        let ax = Axis::of(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(ax.outer * total * ax.inner);
        for o in 0..ax.outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                let w = len * ax.inner;
                out.extend_from_slice(&d[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.owned(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer: ax.outer,
                inner: ax.inner,
                lens,
            },
            grad,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let ax = self.check_axis(x, axis, "slice")?;
        if start >= end || end > ax.len {
            return Err(shape_err("slice", &[self.shape(x), &[start, end]]));
        }
        let d = self.value(x).data();
        let w = (end - start) * ax.inner;
        let mut out = Vec::with_capacity(ax.outer * w);
        for o in 0..ax.outer {
            let base = o * ax.len * ax.inner + start * ax.inner;
            out.extend_from_slice(&d[base..base + w]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = end - start;
        let grad = self.g(x);
        Ok(self.owned(
            Tensor::new(shape, out)?,
            Op::Slice {
                x,
                axis: ax,
                start,
                end,
            },
            grad,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let grad = self.g(x);
        self.owned(Tensor::scalar(s), Op::Sum { x }, grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        let grad = self.g(x);
        self.owned(Tensor::scalar(s), Op::Mean { x }, grad)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits[B, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        let (b, v) = (t.rows(), t.cols());
        if targets.len() != b {
            return Err(shape_err("cross_entropy", &[t.shape(), &[targets.len()]]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                len: v,
            });
        }
        let mut probs = vec![F::zero(); b * v];
        let mut total = F::zero();
        for r in 0..b {
            let row = t.row(r);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for j in 0..v {
                let e = (row[j] - m).exp();
                probs[r * v + j] = e;
                s += e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / s;
            }
            total += m + s.ln() - row[targets[r]];
        }
        let loss = total / F::of(b as f64);
        let grad = self.g(logits);
        Ok(self.owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            grad,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q[Tq, h*dk]`, `k[Tk, h*dk]`, `v[Tk, h*dv]`; head `i` uses columns
    /// `i*dk..(i+1)*dk`. `mask[Tq, Tk]` is additive (0 or -inf). Output is
    /// `[Tq, h*dv]` with heads concatenated.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Tensor<F>>,
    ) -> Result<Var, AutodiffError> {
        let (tq_, tk_, tv_) = (self.value(q), self.value(k), self.value(v));
        let bad = || {
            shape_err(
                "scaled_dot_attention",
                &[tq_.shape(), tk_.shape(), tv_.shape(), &[heads]],
            )
        };
        if heads == 0 || tq_.rank() != 2 || tk_.rank() != 2 || tv_.rank() != 2 {
            return Err(bad());
        }
        let (tq, hdk) = (tq_.shape()[0], tq_.shape()[1]);
        let (tk, hdv) = (tv_.shape()[0], tv_.shape()[1]);
        if tk_.shape() != [tk, hdk] || hdk % heads != 0 || hdv % heads != 0 {
            return Err(bad());
        }
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(shape_err("scaled_dot_attention", &[m.shape(), &[tq, tk]]));
            }
        }
        let (dk, dv) = (hdk / heads, hdv / heads);
        let scale = F::one() / F::of(dk as f64).sqrt();
        let (qd, kd, vd) = (tq_.data(), tk_.data(), tv_.data());
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * hdv];
        for h in 0..heads {
            for i in 0..tq {
                let qi = &qd[i * hdk + h * dk..i * hdk + (h + 1) * dk];
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut mx = F::neg_infinity();
                for j in 0..tk {
                    let mut s = dot(qi, &kd[j * hdk + h * dk..j * hdk + (h + 1) * dk]) * scale;
                    if let Some(m) = mask {
                        s += m.data()[i * tk + j];
                    }
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = F::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj = *pj / z;
                }
                let orow = &mut out[i * hdv + h * dv..i * hdv + (h + 1) * dv];
                for j in 0..tk {
                    if p[j] != F::zero() {
                        axpy(p[j], &vd[j * hdv + h * dv..j * hdv + (h + 1) * dv], orow);
                    }
                }
            }
        }
        let grad = self.g(q) || self.g(k) || self.g(v);
        Ok(self.owned(
            Tensor::new(vec![tq, hdv], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            grad,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<F> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = t.shape().to_vec();
        let grad = self.g(x);
        self.owned(
            Tensor::new(shape, data).expect("same shape"),
            Op::Dropout { x, mask },
            grad,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let grad = self.g(x);
        Ok(self.owned(t, Op::Reshape { x }, grad))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, AutodiffError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaves = Vec::new();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            if let Op::Leaf { param } = node.op {
                let g = grads[i].take().unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                leaves.push((
                    Var(i),
                    param,
                    Tensor::new(node.value.shape().to_vec(), g)?,
                ));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(&node.op, &node.value, &g, &mut grads);
        }
        // Leaves that come after `loss` on the tape cannot be reached.
        for (i, node) in self.nodes.iter().enumerate().skip(n) {
            if let (true, Op::Leaf { param }) = (node.grad, &node.op) {
                leaves.push((Var(i), *param, Tensor::zeros(node.value.shape())));
            }
        }
        leaves.sort_by_key(|(v, _, _)| *v);
        Ok(Gradients { leaves })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.g(v) {
            return None;
        }
        let numel = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); numel]))
    }

    fn backward_node(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                let m = ta.rows();
                let n = out.cols();
                let (ad, bd) = (ta.data(), tb.data());
                if let Some(ga) = self.acc(grads, *a) {
                    // ga += g b^T, or g b when b was used transposed.
                    let bv = if *trans_b { Strided::rows(bd, k) } else { Strided::transposed(bd, n) };
                    F::gemm(m, n, k, Strided::rows(g, n), bv, F::one(), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // gb[n, k] += g^T a
                        F::gemm(n, m, k, Strided::transposed(g, n), Strided::rows(ad, k), F::one(), gb);
                    } else {
                        // gb[k, n] += a^T g
                        F::gemm(k, m, n, Strided::transposed(ad, k), Strided::rows(g, n), F::one(), gb);
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let p = tb.numel();
                if let Some(ga) = self.acc(grads, *a) {
                    match kind {
                        Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        Binary::Mul => {
                            for (i, (x, &y)) in ga.iter_mut().zip(g).enumerate() {
                                *x += y * tb.data()[i % p];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        let j = i % p;
                        match kind {
                            Binary::Add => gb[j] += y,
                            Binary::Sub => gb[j] -= y,
                            Binary::Mul => gb[j] += y * ta.data()[i],
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let ov = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if xv[i] > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Gelu => gelu_grad(xv[i]),
                            Unary::Exp => ov[i],
                            Unary::Log => F::one() / xv[i],
                            Unary::Sigmoid => ov[i] * (F::one() - ov[i]),
                            Unary::Tanh => F::one() - ov[i] * ov[i],
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Huber { x, sigma } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * huber_grad(xv[i], *sigma);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for_each_lane(*axis, |idx| {
                        let s: F = idx.clone().map(|i| g[i] * y[i]).sum();
                        for i in idx {
                            gx[i] += y[i] * (g[i] - s);
                        }
                    });
                }
            }
            Op::LogSoftmax { x, axis } => {
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for_each_lane(*axis, |idx| {
                        let s: F = idx.clone().map(|i| g[i]).sum();
                        for i in idx {
                            gx[i] += g[i] - y[i].exp() * s;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gm = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let df = F::of(d as f64);
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 = m1 / df;
                        m2 = m2 / df;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gm[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut off = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    if let Some(gp) = self.acc(grads, p) {
                        let w = len * inner;
                        for o in 0..*outer {
                            let src = &g[o * total * inner + off * inner..][..w];
                            gp[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let w = (end - start) * axis.inner;
                    for o in 0..axis.outer {
                        let base = o * axis.len * axis.inner + start * axis.inner;
                        gx[base..base + w]
                            .iter_mut()
                            .zip(&g[o * w..(o + 1) * w])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = g[0] / F::of(gx.len() as f64);
                    gx.iter_mut().for_each(|a| *a += c);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let b = targets.len();
                    let v = probs.len() / b;
                    let c = g[0] / F::of(b as f64);
                    for r in 0..b {
                        for j in 0..v {
                            gl[r * v + j] += c * probs[r * v + j];
                        }
                        gl[r * v + targets[r]] -= c;
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
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
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
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (tq_, tk_, tv_) = (self.value(q), self.value(k), self.value(v));
        let (tq, hdk) = (tq_.shape()[0], tq_.shape()[1]);
        let (tk, hdv) = (tv_.shape()[0], tv_.shape()[1]);
        let (dk, dv) = (hdk / heads, hdv / heads);
        let scale = F::one() / F::of(dk as f64).sqrt();
        let (qd, kd, vd) = (tq_.data(), tk_.data(), tv_.data());

        // dS = P * (dP - rowsum(dP * P)), with dP = dO V^T.
        let mut ds = vec![F::zero(); heads * tq * tk];
        for h in 0..heads {
            for i in 0..tq {
                let go = &g[i * hdv + h * dv..i * hdv + (h + 1) * dv];
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let row = &mut ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut s = F::zero();
                for j in 0..tk {
                    if p[j] != F::zero() {
                        let dp = dot(go, &vd[j * hdv + h * dv..j * hdv + (h + 1) * dv]);
                        row[j] = dp;
                        s += dp * p[j];
                    }
                }
                for j in 0..tk {
                    row[j] = p[j] * (row[j] - s);
                }
            }
        }
        if let Some(gv) = self.acc(grads, v) {
            for h in 0..heads {
                for i in 0..tq {
                    let go = &g[i * hdv + h * dv..i * hdv + (h + 1) * dv];
                    let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    for j in 0..tk {
                        if p[j] != F::zero() {
                            axpy(p[j], go, &mut gv[j * hdv + h * dv..j * hdv + (h + 1) * dv]);
                        }
                    }
                }
            }
        }
        if let Some(gq) = self.acc(grads, q) {
            for h in 0..heads {
                for i in 0..tq {
                    let row = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    let dst = &mut gq[i * hdk + h * dk..i * hdk + (h + 1) * dk];
                    for j in 0..tk {
                        if row[j] != F::zero() {
                            axpy(row[j] * scale, &kd[j * hdk + h * dk..j * hdk + (h + 1) * dk], dst);
                        }
                    }
                }
            }
        }
        if let Some(gk) = self.acc(grads, k) {
            for h in 0..heads {
                for i in 0..tq {
                    let row = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    let qi = &qd[i * hdk + h * dk..i * hdk + (h + 1) * dk];
                    for j in 0..tk {
                        if row[j] != F::zero() {
                            axpy(row[j] * scale, qi, &mut gk[j * hdk + h * dk..j * hdk + (h + 1) * dk]);
                        }
                    }
                }
            }
        }
    }
}

fn for_each_lane(ax: Axis, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..ax.outer {
        for i in 0..ax.inner {
            let base = o * ax.len * ax.inner + i;
            f((base..base + ax.len * ax.inner).step_by(ax.inner));
        }
    }
}

/// `r^2/2` inside `[-sigma, sigma]`, `sigma(|r| - sigma/2)` outside.
pub fn huber<F: Scalar>(r: F, sigma: F) -> F {
    let a = r.abs();
    if a <= sigma {
        F::of(0.5) * r * r
    } else {
        sigma * (a - F::of(0.5) * sigma)
    }
}

pub fn huber_grad<F: Scalar>(r: F, sigma: F) -> F {
    if r.abs() <= sigma {
        r
    } else {
        sigma * r.signum()
    }
}

/// Gradients produced by [`Graph::backward`] for every grad-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    leaves: Vec<(Var, Option<ParamId>, Tensor<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves
            .binary_search_by_key(&v, |(w, _, _)| *w)
            .ok()
            .map(|i| &self.leaves[i].2)
    }

    /// Per-parameter gradients. A parameter used by several leaves yields one
    /// entry per leaf.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.leaves
            .iter()
            .filter_map(|(_, p, t)| p.map(|p| (p, t)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
