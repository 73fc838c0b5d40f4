//! Encoder-decoder transformer over flattened SID token histories.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::Adapter;
use super::layers::{normal_tensor, FeedForward, LayerNorm, MultiHeadAttention, Segment};
use super::train::Example;
use super::{ModelError, SidCatalog};
use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::decode::{DecodeError, NextTokenModel};
use crate::trie::{Token, BOS};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    /// Encoder and decoder each get this many layers.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Share the input embedding with the output projection.
    pub tie_embeddings: bool,
    pub gated_ff: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 2,
            d_kv: 32,
            d_ff: 256,
            dropout: 0.1,
            vocab_size: 1027,
            max_positions: 128,
            tie_embeddings: true,
            gated_ff: true,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl Seq2SeqConfig {
    /// A row of the RS scaling grid with the default vocabulary.
    pub fn scaling_row(layers: usize, d_model: usize, heads: usize, d_kv: usize, d_ff: usize) -> Self {
        Self {
            layers,
            d_model,
            heads,
            d_kv,
            d_ff,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_kv", self.d_kv),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0) {
            return Err(ModelError::InvalidConfig("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Exact trainable parameter count of [`build_tiger`] without adapters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ln = LayerNorm::count(d);
        let attn = MultiHeadAttention::count(d, self.heads, self.d_kv);
        let ff = FeedForward::count(d, self.d_ff, self.gated_ff);
        let enc = 2 * ln + attn + ff;
        let dec = 3 * ln + 2 * attn + ff;
        let out = if self.tie_embeddings { 0 } else { self.vocab_size * d };
        self.vocab_size * d + self.max_positions * d + out + self.layers * (enc + dec) + 2 * ln
    }
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm encoder-decoder with a learned position table shared by both stacks.
#[derive(Debug, Clone)]
pub struct Tiger<F: Scalar> {
    pub cfg: Seq2SeqConfig,
    pub store: ParamStore<F>,
    tok: ParamId,
    pos: ParamId,
    out: Option<ParamId>,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    enc_ln: LayerNorm,
    dec_ln: LayerNorm,
    pub(crate) adapter: Option<Adapter<F>>,
}

/// Encoder tokens for one history plus the items whose first token they start.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncInput {
    pub tokens: Vec<usize>,
    pub items: Vec<usize>,
}

pub fn build_tiger<F: Scalar>(cfg: &Seq2SeqConfig) -> Result<Tiger<F>, ModelError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "tiger-init", 0);
    let mut store = ParamStore::new();
    let (d, std) = (cfg.d_model, cfg.init_std);
    let tok = store.add("tok_emb", normal_tensor(&[cfg.vocab_size, d], std, &mut rng));
    let pos = store.add("pos_emb", normal_tensor(&[cfg.max_positions, d], std, &mut rng));
    let out = (!cfg.tie_embeddings).then(|| store.add("lm_head", normal_tensor(&[d, cfg.vocab_size], std, &mut rng)));
    let enc = (0..cfg.layers)
        .map(|i| {
            let n = format!("enc.{i}");
            EncLayer {
                ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d),
                attn: MultiHeadAttention::new(&mut store, &format!("{n}.attn"), d, cfg.heads, cfg.d_kv, std, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d),
                ff: FeedForward::new(&mut store, &format!("{n}.ff"), d, cfg.d_ff, cfg.gated_ff, std, &mut rng),
            }
        })
        .collect();
    let dec = (0..cfg.layers)
        .map(|i| {
            let n = format!("dec.{i}");
            DecLayer {
                ln1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d),
                self_attn: MultiHeadAttention::new(&mut store, &format!("{n}.self"), d, cfg.heads, cfg.d_kv, std, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d),
                cross: MultiHeadAttention::new(&mut store, &format!("{n}.cross"), d, cfg.heads, cfg.d_kv, std, &mut rng),
                ln3: LayerNorm::new(&mut store, &format!("{n}.ln3"), d),
                ff: FeedForward::new(&mut store, &format!("{n}.ff"), d, cfg.d_ff, cfg.gated_ff, std, &mut rng),
            }
        })
        .collect();
    let enc_ln = LayerNorm::new(&mut store, "enc.final_ln", d);
    let dec_ln = LayerNorm::new(&mut store, "dec.final_ln", d);
    Ok(Tiger {
        cfg: cfg.clone(),
        store,
        tok,
        pos,
        out,
        enc,
        dec,
        enc_ln,
        dec_ln,
        adapter: None,
    })
}

fn positions(lens: &[usize]) -> Vec<usize> {
    lens.iter().flat_map(|&n| 0..n).collect()
}

impl<F: Scalar> Tiger<F> {
    /// Analytic count including any attached adapter.
    pub fn param_count(&self) -> usize {
        self.cfg.param_count() + self.adapter.as_ref().map_or(0, |a| a.param_count())
    }

    pub fn adapter(&self) -> Option<&Adapter<F>> {
        self.adapter.as_ref()
    }

    pub fn check_catalog(&self, catalog: &SidCatalog) -> Result<(), ModelError> {
        if catalog.vocab_size() != self.cfg.vocab_size {
            return Err(ModelError::VocabMismatch {
                config: self.cfg.vocab_size,
                sids: catalog.vocab_size(),
            });
        }
        if catalog.item_len() > self.cfg.max_positions {
            return Err(ModelError::InvalidConfig(format!(
                "max_positions {} is shorter than one item ({} tokens)",
                self.cfg.max_positions,
                catalog.item_len()
            )));
        }
        Ok(())
    }

    /// Most recent items whose tokens fit in `max_positions`.
    pub(crate) fn encoder_input(&self, catalog: &SidCatalog, history: &[usize]) -> EncInput {
        let per = catalog.item_len();
        let keep = history.len().min(self.cfg.max_positions / per);
        let items = history[history.len() - keep..].to_vec();
        let mut tokens: Vec<usize> = items
            .iter()
            .flat_map(|&i| catalog.tokens(i).iter().map(|&t| t as usize))
            .collect();
        if tokens.is_empty() {
            tokens.push(BOS as usize);
        }
        EncInput { tokens, items }
    }

    fn dropout(&self, g: &mut Graph<'_, F>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(r) => g.dropout(x, self.cfg.dropout, *r),
            None => x,
        }
    }

    fn embed<'p>(&'p self, g: &mut Graph<'p, F>, tokens: &[usize], lens: &[usize]) -> Result<Var, AutodiffError> {
        let tok = g.param(&self.store, self.tok);
        let pos = g.param(&self.store, self.pos);
        let e = g.embedding(tok, tokens)?;
        let p = g.embedding(pos, &positions(lens))?;
        g.add(e, p)
    }

    /// Packed encoder output and per-history row counts.
    pub(crate) fn encode<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        inputs: &[EncInput],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<usize>), AutodiffError> {
        let lens: Vec<usize> = inputs.iter().map(|e| e.tokens.len()).collect();
        let tokens: Vec<usize> = inputs.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let mut x = self.embed(g, &tokens, &lens)?;
        if let Some(ad) = &self.adapter {
            let items: Vec<usize> = inputs.iter().flat_map(|e| e.items.iter().copied()).collect();
            if !items.is_empty() {
                let a = ad.forward(g, &self.store, &items)?;
                let zero = g.constant(Tensor::zeros(&[1, self.cfg.d_model]));
                let table = g.concat(&[a, zero], 0)?;
                let per = inputs
                    .iter()
                    .find(|e| !e.items.is_empty())
                    .map_or(1, |e| e.tokens.len() / e.items.len());
                let mut ids = Vec::with_capacity(tokens.len());
                let mut next = 0;
                for e in inputs {
                    for r in 0..e.tokens.len() {
                        if r % per == 0 && r / per < e.items.len() {
                            ids.push(next);
                            next += 1;
                        } else {
                            ids.push(items.len());
                        }
                    }
                }
                let add = g.embedding(table, &ids)?;
                x = g.add(x, add)?;
            }
        }
        x = self.dropout(g, x, &mut rng);
        let segs = Segment::packed(&lens);
        for l in &self.enc {
            let h = l.ln1.forward(g, &self.store, x)?;
            let a = l.attn.forward_packed(g, &self.store, h, h, &segs, false)?;
            let a = self.dropout(g, a, &mut rng);
            x = g.add(x, a)?;
            let h = l.ln2.forward(g, &self.store, x)?;
            let f = l.ff.forward(g, &self.store, h)?;
            let f = self.dropout(g, f, &mut rng);
            x = g.add(x, f)?;
        }
        Ok((self.enc_ln.forward(g, &self.store, x)?, lens))
    }

    /// Packed decoder states; sequence `i` attends to `memory_rows[i]`.
    pub(crate) fn decode_states<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        inputs: &[Vec<usize>],
        memory: Var,
        memory_rows: &[(usize, usize)],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, AutodiffError> {
        let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let tokens: Vec<usize> = inputs.iter().flatten().copied().collect();
        let mut x = self.embed(g, &tokens, &lens)?;
        x = self.dropout(g, x, &mut rng);
        let self_segs = Segment::packed(&lens);
        let cross_segs: Vec<Segment> = self_segs
            .iter()
            .zip(memory_rows)
            .map(|(s, &(m_start, m_len))| Segment { m_start, m_len, ..*s })
            .collect();
        for l in &self.dec {
            let h = l.ln1.forward(g, &self.store, x)?;
            let a = l.self_attn.forward_packed(g, &self.store, h, h, &self_segs, true)?;
            let a = self.dropout(g, a, &mut rng);
            x = g.add(x, a)?;
            let h = l.ln2.forward(g, &self.store, x)?;
            let c = l.cross.forward_packed(g, &self.store, h, memory, &cross_segs, false)?;
            let c = self.dropout(g, c, &mut rng);
            x = g.add(x, c)?;
            let h = l.ln3.forward(g, &self.store, x)?;
            let f = l.ff.forward(g, &self.store, h)?;
            let f = self.dropout(g, f, &mut rng);
            x = g.add(x, f)?;
        }
        self.dec_ln.forward(g, &self.store, x)
    }

    pub(crate) fn logits<'p>(&'p self, g: &mut Graph<'p, F>, h: Var) -> Result<Var, AutodiffError> {
        match self.out {
            Some(w) => {
                let w = g.param(&self.store, w);
                g.matmul(h, w)
            }
            None => {
                let t = g.param(&self.store, self.tok);
                g.matmul_t(h, t)
            }
        }
    }

    /// Teacher-forced logits `[B * item_len, V]` and the flattened targets.
    pub(crate) fn teacher_forced<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        catalog: &SidCatalog,
        batch: &[Example],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<usize>), AutodiffError> {
        let enc_in: Vec<EncInput> = batch.iter().map(|e| self.encoder_input(catalog, &e.history)).collect();
        let (memory, lens) = self.encode(g, &enc_in, rng.as_deref_mut())?;
        let mut rows = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &n in &lens {
            rows.push((start, n));
            start += n;
        }
        let mut dec_in = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for e in batch {
            let t: Vec<usize> = catalog.tokens(e.target).iter().map(|&x| x as usize).collect();
            let mut input = vec![BOS as usize];
            input.extend_from_slice(&t[..t.len() - 1]);
            dec_in.push(input);
            targets.extend(t);
        }
        let h = self.decode_states(g, &dec_in, memory, &rows, rng)?;
        Ok((self.logits(g, h)?, targets))
    }

    /// Mean token cross-entropy of a batch.
    pub fn batch_loss<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        catalog: &SidCatalog,
        batch: &[Example],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, AutodiffError> {
        let (logits, targets) = self.teacher_forced(g, catalog, batch, rng)?;
        g.cross_entropy(logits, &targets)
    }

    /// Evaluation-mode teacher-forced logits shaped `[B, item_len, V]`.
    pub fn forward_logits(&self, catalog: &SidCatalog, batch: &[Example]) -> Result<Tensor<F>, ModelError> {
        self.check_catalog(catalog)?;
        let mut g = Graph::no_grad();
        let (logits, _) = self.teacher_forced(&mut g, catalog, batch, None)?;
        let shape = [batch.len(), catalog.item_len(), self.cfg.vocab_size];
        Ok(g.value(logits).clone().reshaped(&shape)?)
    }

    /// Runs the encoder once for decoding.
    pub fn encode_context(&self, catalog: &SidCatalog, history: &[usize]) -> Result<EncodedContext<'_, F>, ModelError> {
        let mut g = Graph::no_grad();
        let input = self.encoder_input(catalog, history);
        let (memory, _) = self.encode(&mut g, &[input], None)?;
        Ok(EncodedContext {
            model: self,
            memory: g.value(memory).clone(),
        })
    }

    /// Copies parameters from `loaded` by name after checking shapes.
    pub fn load_params(&mut self, loaded: &ParamStore<F>) -> Result<(), ModelError> {
        load_params(&mut self.store, loaded)
    }
}

pub(crate) fn load_params<F: Scalar>(store: &mut ParamStore<F>, loaded: &ParamStore<F>) -> Result<(), ModelError> {
    if loaded.len() != store.len() {
        return Err(ModelError::CheckpointMismatch(format!(
            "{} tensors in checkpoint, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = loaded
            .id(&name)
            .ok_or_else(|| ModelError::CheckpointMismatch(format!("missing {name}")))?;
        let t = loaded.get(src);
        if t.shape() != store.get(id).shape() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{name}: shape {:?} vs {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

/// A model bound to one encoded history, ready for beam search.
pub struct EncodedContext<'m, F: Scalar> {
    model: &'m Tiger<F>,
    memory: Tensor<F>,
}

impl<F: Scalar> NextTokenModel for EncodedContext<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn next_token_logits(&self, context: &[Token], generated: &[Token]) -> Result<Vec<f64>, DecodeError> {
        Ok(self.next_token_logits_batch(context, &[generated])?.remove(0))
    }

    fn next_token_logits_batch(&self, _context: &[Token], generated: &[&[Token]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        let m = self.model;
        let mut g = Graph::no_grad();
        let memory = g.constant(self.memory.clone());
        let rows = vec![(0, self.memory.rows()); generated.len()];
        let inputs: Vec<Vec<usize>> = generated
            .iter()
            .map(|s| std::iter::once(BOS).chain(s.iter().copied()).map(|t| t as usize).collect())
            .collect();
        if let Some(n) = inputs.iter().map(Vec::len).find(|&n| n > m.cfg.max_positions) {
            return Err(DecodeError::Model(format!("decoder input of {n} tokens exceeds max_positions")));
        }
        let err = |e: AutodiffError| DecodeError::Model(e.to_string());
        let h = m.decode_states(&mut g, &inputs, memory, &rows, None).map_err(err)?;
        let logits = m.logits(&mut g, h).map_err(err)?;
        let t = g.value(logits);
        let v = t.cols();
        let mut out = Vec::with_capacity(inputs.len());
        let mut end = 0;
        for s in &inputs {
            end += s.len();
            out.push(t.data()[(end - 1) * v..end * v].iter().map(|x| x.f64()).collect());
        }
        Ok(out)
    }
}

impl<F: Scalar> crate::autodiff::gradcheck::Parameterized<F> for Tiger<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}
