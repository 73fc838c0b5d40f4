//! Central finite-difference checks for graph ops and whole models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradBuffer, Graph, ParamId, ParamStore, Tensor, Var};

/// Central-difference step.
pub const EPS: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients
/// from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares reverse-mode gradients of `build` against central differences.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone(), true)).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let eps = EPS;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = relative_error(a, fd);
            worst = worst.max(err);
        }
    }
    worst
}

/// Random projection onto a scalar so every output element gets a distinct weight.
pub fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    let w = rand_tensor(g.shape(y), seed);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MatMulT,
    AddBias,
    Mul,
    Embedding,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Relu,
    Gelu,
    Concat,
    Slice,
    Mean,
    CrossEntropy,
    Attention,
    Huber,
    Sigmoid,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::AddBias,
        OpKind::Mul,
        OpKind::Embedding,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Mean,
        OpKind::CrossEntropy,
        OpKind::Attention,
        OpKind::Huber,
        OpKind::Sigmoid,
    ];
}

/// Worst relative error of one op over an `r x c` random instance.
pub fn check_op(kind: OpKind, r: usize, c: usize, seed: u64) -> f64 {
    let x = rand_tensor(&[r, c], seed);
    let w = rand_tensor(&[c, r + 1], seed + 1);
    let row = rand_tensor(&[c], seed + 2);
    match kind {
        OpKind::MatMul => grad_check(&[x, w], &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, seed)
        }),
        OpKind::MatMulT => {
            let wt = rand_tensor(&[r + 2, c], seed + 3);
            grad_check(&[x, wt], &|g, v| {
                let y = g.matmul_t(v[0], v[1]).unwrap();
                project(g, y, seed)
            })
        }
        OpKind::AddBias => grad_check(&[x, row], &|g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            let y = g.sub(y, v[1]).unwrap();
            let y = g.add(y, v[1]).unwrap();
            project(g, y, seed)
        }),
        OpKind::Mul => grad_check(&[x.clone(), x, row], &|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            let y = g.mul(y, v[2]).unwrap();
            project(g, y, seed)
        }),
        OpKind::Embedding => {
            let ids: Vec<usize> = (0..r + 2).map(|i| (i * 7 + seed as usize) % r).collect();
            grad_check(&[x], &|g, v| {
                let y = g.embedding(v[0], &ids).unwrap();
                project(g, y, seed)
            })
        }
        OpKind::Softmax => grad_check(&[x], &|g, v| {
            let y = g.softmax(v[0], (seed % 2) as usize).unwrap();
            project(g, y, seed)
        }),
        OpKind::LogSoftmax => grad_check(&[x], &|g, v| {
            let y = g.log_softmax(v[0], (seed % 2) as usize).unwrap();
            project(g, y, seed)
        }),
        OpKind::LayerNorm => {
            // Nearly constant rows make the normalization sharply curved at
            // the step size; alternating offsets keep every row spread out.
            let mut x = x;
            x.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.5 * *v + if (i % c) % 2 == 0 { 1.0 } else { -1.0 });
            let beta = rand_tensor(&[c], seed + 4);
            grad_check(&[x, row, beta], &|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                project(g, y, seed)
            })
        }
        OpKind::Relu => {
            // Keep inputs away from the kink.
            let mut x = x;
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 1e-2 {
                    *v += 0.05
                }
            });
            grad_check(&[x], &|g, v| {
                let y = g.relu(v[0]);
                project(g, y, seed)
            })
        }
        OpKind::Gelu => grad_check(&[x], &|g, v| {
            let y = g.gelu(v[0]);
            project(g, y, seed)
        }),
        OpKind::Concat => {
            let y2 = rand_tensor(&[r, c + 1], seed + 5);
            grad_check(&[x, y2], &|g, v| {
                let y = g.concat(&[v[0], v[1], v[0]], 1).unwrap();
                project(g, y, seed)
            })
        }
        OpKind::Slice => grad_check(&[x], &|g, v| {
            let y = g.slice(v[0], 1, c / 2, c).unwrap();
            project(g, y, seed)
        }),
        OpKind::Mean => grad_check(&[x], &|g, v| {
            let y = g.mul(v[0], v[0]).unwrap();
            g.mean(y)
        }),
        OpKind::CrossEntropy => {
            let targets: Vec<usize> = (0..r).map(|i| (i + seed as usize) % c).collect();
            grad_check(&[x], &|g, v| g.cross_entropy(v[0], &targets).unwrap())
        }
        OpKind::Attention => {
            let heads = 1 + (seed % 2) as usize;
            let q = rand_tensor(&[r, 2 * heads], seed + 6);
            let k = rand_tensor(&[c, 2 * heads], seed + 7);
            let vv = rand_tensor(&[c, 3 * heads], seed + 8);
            grad_check(&[q, k, vv], &|g, v| {
                let y = g.attention(v[0], v[1], v[2], heads, None).unwrap();
                project(g, y, seed)
            })
        }
        OpKind::Huber => {
            let mut x = x;
            x.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            x.data_mut().iter_mut().for_each(|v| {
                if (v.abs() - 0.03).abs() < 1e-3 {
                    *v *= 1.2
                }
            });
            grad_check(&[x], &|g, v| {
                let y = g.huber(v[0], 0.03);
                project(g, y, seed)
            })
        }
        OpKind::Sigmoid => grad_check(&[x], &|g, v| {
            let y = g.sigmoid(v[0]);
            let y = g.exp(y);
            project(g, y, seed)
        }),
    }
}

/// Anything that owns a parameter store.
pub trait Parameterized<F> {
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
}

impl<F> Parameterized<F> for ParamStore<F> {
    fn params(&self) -> &ParamStore<F> {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(ParamId, usize)>,
}

/// Compares `grads` with central differences of `loss` at up to
/// `per_param` seeded coordinates of every parameter tensor.
pub fn check_model<M: Parameterized<f64>, E>(
    model: &mut M,
    grads: &GradBuffer<f64>,
    per_param: usize,
    seed: u64,
    loss: impl Fn(&M) -> Result<f64, E>,
) -> Result<ModelCheck, E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut out = ModelCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        let n = model.params().get(id).numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let x0 = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = x0 + EPS;
            let up = loss(model);
            model.params_mut().get_mut(id).data_mut()[i] = x0 - EPS;
            let down = loss(model);
            model.params_mut().get_mut(id).data_mut()[i] = x0;
            let fd = (up? - down?) / (2.0 * EPS);
            let err = relative_error(grads.get(id)[i], fd);
            out.checked += 1;
            if err > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = out.max_rel_err.max(err);
                out.worst = Some((id, i));
            }
        }
    }
    Ok(out)
}
