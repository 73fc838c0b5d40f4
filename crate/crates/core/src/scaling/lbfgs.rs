//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop once the largest gradient component falls below this.
    pub gtol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 2000,
            gtol: 1e-12,
            c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-loop recursion: returns `-H g` for the implicit inverse Hessian `H`.
fn direction(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|x| *x *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|x| *x = -*x);
    q
}

/// Minimizes `f`, which returns the value and gradient or `None` where the
/// objective is undefined. Undefined trial points are treated as failed
/// line-search steps.
pub fn minimize<Fun>(mut f: Fun, x0: &[f64], opts: &LbfgsOptions) -> Option<LbfgsResult>
where
    Fun: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x = x0.to_vec();
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut history = vec![fx];
    let mut iterations = 0;
    let mut converged = inf_norm(&g) < opts.gtol || fx == 0.0;
    while !converged && iterations < opts.max_iter {
        let mut d = direction(&g, &mem);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut step = if mem.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft <= fx + opts.c1 * step * slope
                {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if mem.is_empty() {
                break;
            }
            // Retry once along steepest descent before giving up.
            mem.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        history.push(fx);
        if inf_norm(&g) < opts.gtol || fx == 0.0 {
            converged = true;
        } else if decrease == 0.0 && mem.is_empty() {
            break;
        }
    }
    Some(LbfgsResult {
        x,
        f: fx,
        iterations,
        converged,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Some((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &LbfgsOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_few_steps() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let f = |x: &[f64]| {
            let v = x.iter().zip(diag).map(|(xi, d)| 0.5 * d * xi * xi).sum();
            Some((v, x.iter().zip(diag).map(|(xi, d)| d * xi).collect()))
        };
        let r = minimize(f, &[1.0; 4], &LbfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations < 40, "{}", r.iterations);
    }

    #[test]
    fn undefined_start_is_none() {
        assert!(minimize(|_| None, &[0.0], &LbfgsOptions::default()).is_none());
    }
}
