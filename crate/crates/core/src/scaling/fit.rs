//! Huber-loss fitting over transformed parameters with seeded multistart.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lbfgs::{minimize, LbfgsOptions, LbfgsResult};
use super::{
    eval_eq, r_square, size_of, EqForm, Param, ScalingError, ScalingParams, ScalingPoint, Structure, Transform,
    Weight, HUBER_SIGMA,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualForm {
    /// `log R̂ - log R`.
    #[default]
    LogLog,
    /// `log R̂ - R`, taken verbatim.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub residual_form: ResidualForm,
    pub multistart: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub sigma: f64,
    /// Parameters held at fixed values instead of fitted.
    pub frozen: BTreeMap<String, f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            residual_form: ResidualForm::LogLog,
            multistart: 32,
            seed: 0,
            max_iter: 2000,
            tolerance: 1e-12,
            sigma: HUBER_SIGMA,
            frozen: BTreeMap::new(),
        }
    }
}

impl FitOptions {
    pub fn freeze(mut self, p: Param, value: f64) -> Self {
        self.frozen.insert(p.name().to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub form: EqForm,
    pub params: ScalingParams,
    pub free: Vec<String>,
    pub objective: f64,
    pub r_square: f64,
    pub converged: bool,
    pub iterations: usize,
    pub start_index: usize,
    pub predictions: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Objective after each accepted optimizer step of the winning start.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// Mean squared difference of log predictions and log observations.
    #[default]
    LogMse,
    Mse,
    Mae,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn to_value(t: Transform, theta: f64) -> f64 {
    match t {
        Transform::Log => theta.exp(),
        Transform::Logit => sigmoid(theta),
    }
}

fn to_theta(t: Transform, v: f64) -> f64 {
    match t {
        Transform::Log => v.ln(),
        Transform::Logit => (v / (1.0 - v)).ln(),
    }
}

/// Everything one objective evaluation needs.
struct Problem {
    structure: Structure,
    free: Vec<Param>,
    fixed: ScalingParams,
    /// Size columns keyed by size name.
    columns: BTreeMap<&'static str, Vec<f64>>,
    obs: Vec<f64>,
    target: Vec<f64>,
    sigma: f64,
}

impl Problem {
    fn new(form: EqForm, points: &[ScalingPoint], opts: &FitOptions) -> Result<Self, ScalingError> {
        let mut fixed = ScalingParams::default();
        let mut frozen = Vec::new();
        for (name, &v) in &opts.frozen {
            let p = Param::from_name(name)?;
            fixed.set(p, v);
            frozen.push(p);
        }
        let free: Vec<Param> = form.params().into_iter().filter(|p| !frozen.contains(p)).collect();
        if points.len() < free.len() {
            return Err(ScalingError::TooFewPoints {
                needed: free.len(),
                got: points.len(),
            });
        }
        for (index, p) in points.iter().enumerate() {
            if !(p.recall > 0.0 && p.recall < 1.0) {
                return Err(ScalingError::InvalidObservation { index, value: p.recall });
            }
        }
        let structure = form.structure();
        let mut columns = BTreeMap::new();
        for t in &structure.terms {
            for (i, &(_, s)) in t.base.iter().enumerate() {
                if !columns.contains_key(s.name()) {
                    let col = points
                        .iter()
                        .map(|p| size_of(form, &p.sizes, s, i == 0))
                        .collect::<Result<Vec<_>, _>>()?;
                    columns.insert(s.name(), col);
                }
            }
        }
        let obs: Vec<f64> = points.iter().map(|p| p.recall).collect();
        let target = match opts.residual_form {
            ResidualForm::LogLog => obs.iter().map(|o| o.ln()).collect(),
            ResidualForm::PaperLiteral => obs.clone(),
        };
        Ok(Self {
            structure,
            free,
            fixed,
            columns,
            obs,
            target,
            sigma: opts.sigma,
        })
    }

    fn unpack(&self, theta: &[f64]) -> ScalingParams {
        let mut p = self.fixed;
        for (&param, &t) in self.free.iter().zip(theta) {
            let mut v = to_value(param.transform(), t);
            if param == Param::R0 {
                v = v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            }
            p.set(param, v);
        }
        p
    }

    /// Huber objective and its gradient with respect to `theta`.
    fn evaluate(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut g: Graph<'_, f64> = Graph::new();
        let th = g.input(Tensor::vector(theta.to_vec()), true);
        let mut vars: BTreeMap<Param, Var> = BTreeMap::new();
        for (i, &p) in self.free.iter().enumerate() {
            let s = g.slice(th, 0, i, i + 1).ok()?;
            let v = match p.transform() {
                Transform::Log => g.exp(s),
                Transform::Logit => g.sigmoid(s),
            };
            vars.insert(p, v);
        }
        let mut param = |g: &mut Graph<'_, f64>, p: Param| -> Var {
            *vars
                .entry(p)
                .or_insert_with(|| g.constant(Tensor::vector(vec![self.fixed.get(p)])))
        };
        let mut pred: Option<Var> = None;
        for t in &self.structure.terms {
            let mut base: Option<Var> = None;
            for &(w, s) in &t.base {
                let col = g.constant(Tensor::vector(self.columns[s.name()].clone()));
                let part = match w {
                    Weight::One => col,
                    Weight::P(p) => {
                        let c = param(&mut g, p);
                        g.mul(col, c).ok()?
                    }
                };
                base = Some(match base {
                    None => part,
                    Some(b) => g.add(b, part).ok()?,
                });
            }
            let lb = g.log(base?);
            let e = param(&mut g, t.exponent);
            let m = g.mul(lb, e).ok()?;
            let m = g.scale(m, -1.0);
            let pw = g.exp(m);
            let c = param(&mut g, t.scale);
            let v = g.mul(pw, c).ok()?;
            let v = g.scale(v, t.sign);
            pred = Some(match pred {
                None => v,
                Some(p) => g.add(p, v).ok()?,
            });
        }
        let mut pred = pred?;
        if let Some(off) = self.structure.offset {
            let o = param(&mut g, off);
            pred = g.add(pred, o).ok()?;
        }
        let lp = g.log(pred);
        let target = g.constant(Tensor::vector(self.target.clone()));
        let r = g.sub(lp, target).ok()?;
        let h = g.huber(r, self.sigma);
        let loss = g.sum(h);
        let f = g.value(loss).item();
        if !f.is_finite() {
            return None;
        }
        let grads = g.backward(loss).ok()?;
        Some((f, grads.get(th)?.data().to_vec()))
    }

    fn predictions(&self, p: &ScalingParams, form: EqForm, points: &[ScalingPoint]) -> Vec<f64> {
        points
            .iter()
            .map(|pt| eval_eq(form, p, &pt.sizes).unwrap_or(f64::NAN))
            .collect()
    }

    /// Seeded, data-aware starting point: coefficients and exponents are drawn
    /// log-uniformly, then each power-law scale is set so its term covers a
    /// random share of the gap between the offset and the observations.
    fn start(&self, seed: u64, index: usize) -> Vec<f64> {
        let mut rng = rng_for(seed, "scaling-start", index as u64);
        let mut p = self.fixed;
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| -> f64 {
            (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
        };
        let max_obs = self.obs.iter().cloned().fold(f64::MIN, f64::max);
        let min_obs = self.obs.iter().cloned().fold(f64::MAX, f64::min);
        for &q in &self.free {
            let v = match q {
                Param::R0 => max_obs + (1.0 - max_obs) * rng.random_range(0.01..0.5),
                Param::E => min_obs * rng.random_range(0.05..0.9),
                Param::ExpA | Param::ExpB => log_uniform(&mut rng, 0.05, 2.0),
                Param::Gamma | Param::Beta | Param::Gamma1 | Param::Gamma2 => log_uniform(&mut rng, 1e-4, 0.5),
                Param::A | Param::B => 1.0,
            };
            p.set(q, v);
        }
        let offset = self.structure.offset.map_or(0.0, |o| p.get(o));
        let n = self.obs.len() as f64;
        let gap = self.obs.iter().map(|o| o - offset).sum::<f64>() / n;
        let mut groups: Vec<(Param, Vec<f64>)> = Vec::new();
        for t in &self.structure.terms {
            let values: Vec<f64> = (0..self.obs.len())
                .map(|i| {
                    let base: f64 = t
                        .base
                        .iter()
                        .map(|&(w, s)| {
                            let c = self.columns[s.name()][i];
                            match w {
                                Weight::One => c,
                                Weight::P(q) => p.get(q) * c,
                            }
                        })
                        .sum();
                    t.sign * base.powf(-p.get(t.exponent))
                })
                .collect();
            match groups.iter_mut().find(|(q, _)| *q == t.scale) {
                Some((_, acc)) => acc.iter_mut().zip(values).for_each(|(a, v)| *a += v),
                None => groups.push((t.scale, values)),
            }
        }
        let k = groups.len() as f64;
        for (q, values) in groups {
            if !self.free.contains(&q) {
                continue;
            }
            let share = gap / k * rng.random_range(0.5..1.5);
            let mean = values.iter().sum::<f64>() / n;
            let s = share / mean;
            p.set(q, if s.is_finite() && s > 0.0 { s } else { 1e-2 });
        }
        self.free.iter().map(|&q| to_theta(q.transform(), p.get(q))).collect()
    }
}

fn run_start(problem: &Problem, opts: &FitOptions, index: usize) -> Option<LbfgsResult> {
    let lb = LbfgsOptions {
        max_iter: opts.max_iter,
        gtol: opts.tolerance,
        ..LbfgsOptions::default()
    };
    let x0 = problem.start(opts.seed, index);
    minimize(|x| problem.evaluate(x), &x0, &lb)
}

/// Minimizes the summed Huber penalty of the residuals with L-BFGS from
/// `opts.multistart` seeded starts. The lowest objective wins, ties going to
/// the earliest start.
pub fn fit(form: EqForm, points: &[ScalingPoint], opts: &FitOptions) -> Result<FitResult, ScalingError> {
    let problem = Problem::new(form, points, opts)?;
    let starts = opts.multistart.max(1);
    let runs: Vec<Option<LbfgsResult>> = (0..starts)
        .into_par_iter()
        .map(|i| run_start(&problem, opts, i))
        .collect();
    let (start_index, best) = runs
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i, r)))
        .min_by(|(i, a), (j, b)| a.f.total_cmp(&b.f).then(i.cmp(j)))
        .ok_or(ScalingError::NoValidStart)?;
    let params = problem.unpack(&best.x);
    let predictions = problem.predictions(&params, form, points);
    let residuals = predictions
        .iter()
        .zip(&problem.target)
        .map(|(p, t)| p.ln() - t)
        .collect();
    Ok(FitResult {
        form,
        params,
        free: problem.free.iter().map(|p| p.name().to_string()).collect(),
        objective: best.f,
        r_square: r_square(&predictions, &problem.obs),
        converged: best.converged,
        iterations: best.iterations,
        start_index,
        predictions,
        residuals,
        objective_history: best.history,
    })
}

/// Fits on a seeded random subset and scores the held-out remainder.
pub fn heldout_error(
    form: EqForm,
    points: &[ScalingPoint],
    holdout_fraction: f64,
    seed: u64,
    metric: ErrorMetric,
    opts: &FitOptions,
) -> Result<f64, ScalingError> {
    let n_hold = if holdout_fraction > 0.0 {
        (holdout_fraction * points.len() as f64).round() as usize
    } else {
        0
    };
    if n_hold == 0 {
        return Err(ScalingError::EmptyHoldout(holdout_fraction));
    }
    if n_hold >= points.len() {
        return Err(ScalingError::EmptyFitSet(holdout_fraction));
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.shuffle(&mut rng_for(seed, "heldout", 0));
    let (held, train) = idx.split_at(n_hold);
    let train_pts: Vec<ScalingPoint> = train.iter().map(|&i| points[i].clone()).collect();
    let fitted = fit(form, &train_pts, opts)?;
    let mut total = 0.0;
    for &i in held {
        let pred = eval_eq(form, &fitted.params, &points[i].sizes)?;
        let obs = points[i].recall;
        total += match metric {
            ErrorMetric::LogMse => (pred.ln() - obs.ln()).powi(2),
            ErrorMetric::Mse => (pred - obs).powi(2),
            ErrorMetric::Mae => (pred - obs).abs(),
        };
    }
    let err = total / held.len() as f64;
    Ok(if err.is_nan() { f64::INFINITY } else { err })
}
