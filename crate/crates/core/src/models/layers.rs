//! Building blocks shared by the sequence models and the RQ-VAE tokenizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) fn normal_tensor<F: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape, |_| F::of(n.sample(rng)))
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = if std > 0.0 {
            normal_tensor(&[in_dim, out_dim], std, rng)
        } else {
            Tensor::zeros(&[in_dim, out_dim])
        };
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        store: &'p ParamStore<F>,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn count(d: usize) -> usize {
        2 * d
    }

    pub fn forward<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        store: &'p ParamStore<F>,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt, F::of(Self::EPS))
    }
}

/// Position-wise feed-forward block: `gelu(x W0) [* x W1] W2`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub wi: Linear,
    pub gate: Option<Linear>,
    pub wo: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        d_ff: usize,
        gated: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let wi = Linear::new(store, &format!("{name}.wi"), d, d_ff, true, std, rng);
        let gate = gated.then(|| Linear::new(store, &format!("{name}.gate"), d, d_ff, true, std, rng));
        let wo = Linear::new(store, &format!("{name}.wo"), d_ff, d, true, std, rng);
        Self { wi, gate, wo }
    }

    pub fn count(d: usize, d_ff: usize, gated: bool) -> usize {
        let n = if gated { 2 } else { 1 };
        n * Linear::count(d, d_ff, true) + Linear::count(d_ff, d, true)
    }

    pub fn forward<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        store: &'p ParamStore<F>,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let h = self.wi.forward(g, store, x)?;
        let mut h = g.gelu(h);
        if let Some(gate) = &self.gate {
            let lin = gate.forward(g, store, x)?;
            h = g.mul(h, lin)?;
        }
        self.wo.forward(g, store, h)
    }
}

/// Multi-head attention with `heads * d_kv` independent of `d_model`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        d_kv: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let inner = heads * d_kv;
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, inner, true, std, rng),
            k: Linear::new(store, &format!("{name}.k"), d, inner, true, std, rng),
            v: Linear::new(store, &format!("{name}.v"), d, inner, true, std, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, d, true, std, rng),
            heads,
        }
    }

    pub fn count(d: usize, heads: usize, d_kv: usize) -> usize {
        3 * Linear::count(d, heads * d_kv, true) + Linear::count(heads * d_kv, d, true)
    }

    /// `x` attends over `memory` (pass `x` again for self-attention).
    pub fn forward<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        store: &'p ParamStore<F>,
        x: Var,
        memory: Var,
        mask: Option<&Tensor<F>>,
    ) -> Result<Var, AutodiffError> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, store, a)
    }

    /// Attention over several sequences packed along rows. Projections run
    /// once on the packed rows; each segment attends only within its own
    /// query and memory ranges.
    pub fn forward_packed<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        store: &'p ParamStore<F>,
        x: Var,
        memory: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var, AutodiffError> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let mut outs = Vec::with_capacity(segments.len());
        for s in segments {
            let qs = g.slice(q, 0, s.q_start, s.q_start + s.q_len)?;
            let ks = g.slice(k, 0, s.m_start, s.m_start + s.m_len)?;
            let vs = g.slice(v, 0, s.m_start, s.m_start + s.m_len)?;
            let mask = causal.then(|| causal_mask::<F>(s.q_len));
            outs.push(g.attention(qs, ks, vs, self.heads, mask.as_ref())?);
        }
        let a = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        self.o.forward(g, store, a)
    }
}

/// Row ranges of one sequence inside packed query and memory tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub m_start: usize,
    pub m_len: usize,
}

impl Segment {
    /// Self-attention segments for consecutive sequences of the given lengths.
    pub fn packed(lens: &[usize]) -> Vec<Segment> {
        let mut start = 0;
        lens.iter()
            .map(|&n| {
                let s = Segment {
                    q_start: start,
                    q_len: n,
                    m_start: start,
                    m_len: n,
                };
                start += n;
                s
            })
            .collect()
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, .., out]`. With `zero_last`, the final layer
    /// starts at zero so the block initially outputs zeros.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        widths: &[usize],
        std: f64,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let s = if zero_last && i + 1 == n { 0.0 } else { std };
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], true, s, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| Linear::count(w[0], w[1], true)).sum()
    }

    pub fn forward<'p, F: Scalar>(
        &self,
        g: &mut Graph<'p, F>,
        store: &'p ParamStore<F>,
        mut x: Var,
    ) -> Result<Var, AutodiffError> {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.gelu(x);
            }
            x = l.forward(g, store, x)?;
        }
        Ok(x)
    }
}

/// Additive mask that blocks attention to later positions.
pub fn causal_mask<F: Scalar>(t: usize) -> Tensor<F> {
    Tensor::from_fn(&[t, t], |i| {
        if i % t > i / t {
            F::neg_infinity()
        } else {
            F::zero()
        }
    })
}
