use serde::{Deserialize, Serialize};

use super::{AutodiffError, GradBuffer, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| vec![F::zero(); t.numel()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Fails without touching any parameter when a
    /// gradient entry is NaN or infinite.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradBuffer<F>) -> Result<(), AutodiffError> {
        for id in store.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        let decay = F::of(1.0 - c.lr * c.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
