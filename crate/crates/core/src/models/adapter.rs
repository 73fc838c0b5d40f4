//! Per-item MLP adapters that inject auxiliary embeddings into the encoder.

use serde::{Deserialize, Serialize};

use super::layers::Mlp;
use super::tiger::Tiger;
use super::{ModelError, SidCatalog};
use crate::autodiff::{AutodiffError, Graph, ParamStore, Scalar, Tensor, Var};
use crate::embed::EmbeddingMatrix;
use crate::util::rng_for;

/// Where the auxiliary vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterSource {
    /// Item embeddings learned by a collaborative model such as SASRec.
    Cf,
    /// Content embeddings of the item text.
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub source: AdapterSource,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    #[serde(default = "default_mode")]
    pub mode: AdapterMode,
    #[serde(default = "default_std")]
    pub init_std: f64,
}

fn default_mode() -> AdapterMode {
    AdapterMode::Add
}

fn default_std() -> f64 {
    0.02
}

impl AdapterConfig {
    pub fn new(source: AdapterSource, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            source,
            in_dim,
            hidden_dim,
            out_dim,
            mode: AdapterMode::Add,
            init_std: default_std(),
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.in_dim, self.hidden_dim, self.out_dim]
    }

    pub fn param_count(&self) -> usize {
        Mlp::count(&self.widths())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths().contains(&0) {
            return Err(ModelError::InvalidConfig("adapter dims must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(ModelError::InvalidConfig("adapter init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable MLP plus the frozen auxiliary rows, ordered like the catalogue.
#[derive(Debug, Clone)]
pub struct Adapter<F: Scalar> {
    pub cfg: AdapterConfig,
    mlp: Mlp,
    aux: Tensor<F>,
}

impl<F: Scalar> Adapter<F> {
    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// `MLP(aux_i)` for each catalogue index in `items`, shaped `[n, out_dim]`.
    pub fn forward<'p>(&self, g: &mut Graph<'p, F>, store: &'p ParamStore<F>, items: &[usize]) -> Result<Var, AutodiffError> {
        let d = self.cfg.in_dim;
        let mut rows = Vec::with_capacity(items.len() * d);
        for &i in items {
            rows.extend_from_slice(self.aux.row(i));
        }
        let x = g.constant(Tensor::new(vec![items.len(), d], rows)?);
        self.mlp.forward(g, store, x)
    }
}

/// Adds an adapter whose last layer starts at zero, so outputs are unchanged
/// until training moves it.
pub fn attach_adapter<F: Scalar>(
    model: &mut Tiger<F>,
    catalog: &SidCatalog,
    aux: &EmbeddingMatrix,
    cfg: &AdapterConfig,
) -> Result<(), ModelError> {
    cfg.validate()?;
    if model.adapter.is_some() {
        return Err(ModelError::InvalidConfig("model already has an adapter".into()));
    }
    if aux.dim() != cfg.in_dim {
        return Err(ModelError::AdapterDimension {
            expected: cfg.in_dim,
            got: aux.dim(),
        });
    }
    if cfg.out_dim != model.cfg.d_model {
        return Err(ModelError::AdapterDimension {
            expected: model.cfg.d_model,
            got: cfg.out_dim,
        });
    }
    let mut data = Vec::with_capacity(catalog.len() * cfg.in_dim);
    for id in catalog.item_ids() {
        let row = aux.get(id).ok_or_else(|| ModelError::UnknownItem(id.clone()))?;
        data.extend(row.iter().map(|&x| F::of(x as f64)));
    }
    let aux = Tensor::new(vec![catalog.len(), cfg.in_dim], data)?;
    let mut rng = rng_for(model.cfg.seed, "adapter-init", 0);
    let mlp = Mlp::new(&mut model.store, "adapter", &cfg.widths(), cfg.init_std, true, &mut rng);
    model.adapter = Some(Adapter {
        cfg: cfg.clone(),
        mlp,
        aux,
    });
    Ok(())
}
