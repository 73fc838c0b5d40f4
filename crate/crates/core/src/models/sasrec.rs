//! Causal self-attention over raw item ids.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{normal_tensor, FeedForward, LayerNorm, MultiHeadAttention, Segment};
use super::{ItemIndex, ModelError};
use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::embed::EmbeddingMatrix;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SasrecConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub item_count: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SasrecConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 2,
            max_positions: 50,
            item_count: 0,
            dropout: 0.1,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl SasrecConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
            ("item_count", self.item_count),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0) {
            return Err(ModelError::InvalidConfig("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Parameters outside the item and position tables (`N_SA`).
    pub fn non_embedding_params(&self) -> usize {
        let d = self.d_model;
        let layer = 2 * LayerNorm::count(d)
            + MultiHeadAttention::count(d, self.heads, d / self.heads)
            + FeedForward::count(d, 4 * d, false);
        self.layers * layer + LayerNorm::count(d)
    }

    pub fn embedding_params(&self) -> usize {
        (self.item_count + self.max_positions) * self.d_model
    }

    pub fn param_count(&self) -> usize {
        self.non_embedding_params() + self.embedding_params()
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Sasrec<F: Scalar> {
    pub cfg: SasrecConfig,
    pub store: ParamStore<F>,
    items: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

pub fn build_sasrec<F: Scalar>(cfg: &SasrecConfig) -> Result<Sasrec<F>, ModelError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "sasrec-init", 0);
    let mut store = ParamStore::new();
    let (d, std) = (cfg.d_model, cfg.init_std);
    let items = store.add("item_emb", normal_tensor(&[cfg.item_count, d], std, &mut rng));
    let pos = store.add("pos_emb", normal_tensor(&[cfg.max_positions, d], std, &mut rng));
    let blocks = (0..cfg.layers)
        .map(|i| {
            let n = format!("block.{i}");
            Block {
                ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d),
                attn: MultiHeadAttention::new(&mut store, &format!("{n}.attn"), d, cfg.heads, d / cfg.heads, std, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d),
                ff: FeedForward::new(&mut store, &format!("{n}.ff"), d, 4 * d, false, std, &mut rng),
            }
        })
        .collect();
    let final_ln = LayerNorm::new(&mut store, "final_ln", d);
    Ok(Sasrec {
        cfg: cfg.clone(),
        store,
        items,
        pos,
        blocks,
        final_ln,
    })
}

impl<F: Scalar> Sasrec<F> {
    /// The most recent `max_positions` items of `seq`.
    pub fn truncate<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        &seq[seq.len().saturating_sub(self.cfg.max_positions)..]
    }

    /// Packed hidden states for each sequence; row `t` sees items `0..=t`.
    pub(crate) fn hidden<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        seqs: &[&[usize]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, AutodiffError> {
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = lens.iter().flat_map(|&n| 0..n).collect();
        let table = g.param(&self.store, self.items);
        let ptab = g.param(&self.store, self.pos);
        let e = g.embedding(table, &ids)?;
        let p = g.embedding(ptab, &pos)?;
        let mut x = g.add(e, p)?;
        let p_drop = self.cfg.dropout;
        let mut drop = |g: &mut Graph<'p, F>, v: Var| match rng.as_deref_mut() {
            Some(r) => g.dropout(v, p_drop, r),
            None => v,
        };
        x = drop(g, x);
        let segs = Segment::packed(&lens);
        for b in &self.blocks {
            let h = b.ln1.forward(g, &self.store, x)?;
            let a = b.attn.forward_packed(g, &self.store, h, h, &segs, true)?;
            let a = drop(g, a);
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, &self.store, x)?;
            let f = b.ff.forward(g, &self.store, h)?;
            let f = drop(g, f);
            x = g.add(x, f)?;
        }
        self.final_ln.forward(g, &self.store, x)
    }

    /// Full-softmax next-item cross-entropy at every position of each sequence.
    pub fn batch_loss<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        seqs: &[Vec<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, AutodiffError> {
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut targets = Vec::new();
        for s in seqs {
            let s = &s[s.len().saturating_sub(self.cfg.max_positions + 1)..];
            inputs.push(&s[..s.len() - 1]);
            targets.extend_from_slice(&s[1..]);
        }
        let h = self.hidden(g, &inputs, rng)?;
        let table = g.param(&self.store, self.items);
        let logits = g.matmul_t(h, table)?;
        g.cross_entropy(logits, &targets)
    }

    /// Evaluation-mode hidden states `[len, d_model]` of one sequence.
    pub fn hidden_states(&self, seq: &[usize]) -> Result<Tensor<F>, ModelError> {
        let mut g = Graph::no_grad();
        let h = self.hidden(&mut g, &[self.truncate(seq)], None)?;
        Ok(g.value(h).clone())
    }

    /// Next-item scores over the whole catalogue.
    pub fn scores(&self, history: &[usize]) -> Result<Vec<f64>, ModelError> {
        if history.is_empty() {
            return Ok(vec![0.0; self.cfg.item_count]);
        }
        let h = self.hidden_states(history)?;
        let last = h.row(h.rows() - 1);
        let table = self.store.get(self.items);
        Ok((0..self.cfg.item_count)
            .map(|i| table.row(i).iter().zip(last).map(|(a, b)| a.f64() * b.f64()).sum())
            .collect())
    }

    /// The learned item table, usable as CF embeddings.
    pub fn item_embeddings(&self, index: &ItemIndex) -> Result<EmbeddingMatrix, ModelError> {
        let t = self.store.get(self.items);
        if index.len() != t.rows() {
            return Err(ModelError::InvalidConfig(format!(
                "index has {} items, model has {}",
                index.len(),
                t.rows()
            )));
        }
        let data = t.data().iter().map(|x| x.f64() as f32).collect();
        EmbeddingMatrix::new(self.cfg.d_model, index.ids().to_vec(), data)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    pub fn load_params(&mut self, loaded: &ParamStore<F>) -> Result<(), ModelError> {
        super::tiger::load_params(&mut self.store, loaded)
    }
}

impl<F: Scalar> crate::autodiff::gradcheck::Parameterized<F> for Sasrec<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}
