use std::collections::HashMap;

use super::{Gradients, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name; parameter names are
    /// fixed by model code, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in parameters whose name satisfies `pred`.
    pub fn census_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(_, n, _)| pred(n))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Dense gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer<F> {
    grads: Vec<Vec<F>>,
}

impl<F: Scalar> GradBuffer<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: store
                .tensors
                .iter()
                .map(|t| vec![F::zero(); t.numel()])
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Adds the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (pid, g) in grads.params() {
            for (a, &b) in self.grads[pid.0].iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    pub fn add(&mut self, other: &GradBuffer<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
