use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{nearest, train_residual_kmeans_raw, SidCodebooks, SidConfig, TokenizerError};
use crate::autodiff::{AdamW, AdamWConfig, GradBuffer, Graph, ParamId, ParamStore, Tensor, Var};
use crate::embed::EmbeddingMatrix;
use crate::models::layers::Mlp;
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CodebookUpdate {
    Gradient,
    Ema { decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqVaeConfig {
    /// Hidden widths of the encoder (mirrored by the decoder). Empty with no
    /// `latent_dim` makes both maps the identity.
    pub hidden: Vec<usize>,
    pub latent_dim: Option<usize>,
    pub beta_commit: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub codebook_update: CodebookUpdate,
    /// Keep encoder and decoder weights fixed.
    pub freeze_autoencoder: bool,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            latent_dim: Some(16),
            beta_commit: 0.25,
            epochs: 50,
            lr: 1e-3,
            batch_size: 256,
            codebook_update: CodebookUpdate::Gradient,
            freeze_autoencoder: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RqVae {
    pub store: ParamStore<f32>,
    encoder: Mlp,
    decoder: Mlp,
    book_ids: Vec<ParamId>,
    pub books: SidCodebooks,
    pub dim: usize,
    pub latent_dim: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    beta: f64,
    frozen: bool,
    ema: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqVaeLoss {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
}

/// `z + sg(q - z)`: forwards `q`, passes gradients to `z` unchanged.
pub fn straight_through<'p>(g: &mut Graph<'p, f32>, z: Var, q: &[f32]) -> Var {
    let zv = g.value(z);
    let shift: Vec<f32> = q.iter().zip(zv.data()).map(|(&a, &b)| a - b).collect();
    let shift = g.constant(Tensor::new(zv.shape().to_vec(), shift).expect("same shape"));
    g.add(z, shift).expect("same shape")
}

fn sum_sq<'p>(g: &mut Graph<'p, f32>, x: Var) -> Var {
    let sq = g.mul(x, x).expect("same shape");
    g.sum(sq)
}

impl RqVae {
    fn build(dim: usize, rc: &RqVaeConfig, seed: u64) -> (ParamStore<f32>, Mlp, Mlp, usize) {
        let latent = rc.latent_dim.unwrap_or(dim);
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "rqvae-init", 0);
        let (enc, dec) = if rc.hidden.is_empty() && latent == dim && rc.latent_dim.is_none() {
            (Mlp { layers: vec![] }, Mlp { layers: vec![] })
        } else {
            let mut ew = vec![dim];
            ew.extend(&rc.hidden);
            ew.push(latent);
            let dw: Vec<usize> = ew.iter().rev().copied().collect();
            let e = Mlp::new(&mut store, "encoder", &ew, (1.0 / dim as f64).sqrt(), false, &mut rng);
            let d = Mlp::new(&mut store, "decoder", &dw, (1.0 / latent as f64).sqrt(), false, &mut rng);
            (e, d)
        };
        (store, enc, dec, latent)
    }

    /// Encoder output for one embedding.
    pub fn encode(&self, h: &[f32]) -> Result<Vec<f32>, TokenizerError> {
        if h.len() != self.dim {
            return Err(TokenizerError::DimensionMismatch {
                expected: self.dim,
                got: h.len(),
            });
        }
        self.encode_batch(h, 1)
    }

    fn encode_batch(&self, x: &[f32], rows: usize) -> Result<Vec<f32>, TokenizerError> {
        let mut g = Graph::no_grad();
        let xv = g.constant(Tensor::new(vec![rows, self.dim], x.to_vec())?);
        let z = self.encoder.forward(&mut g, &self.store, xv)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Graph for one batch; returns `(loss, recon, codebook, commit, per-level (codes, residuals))`.
    #[allow(clippy::type_complexity)]
    fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, f32>,
        x: &[f32],
        rows: usize,
    ) -> Result<(Var, Var, Var, Var, Vec<(Vec<usize>, Vec<f32>)>), TokenizerError> {
        let xv = g.constant(Tensor::new(vec![rows, self.dim], x.to_vec())?);
        let z = self.encoder.forward(g, &self.store, xv)?;
        let zl = self.latent_dim;
        let zval = g.value(z).data().to_vec();
        let mut r = zval.clone();
        let mut q = vec![0.0f32; r.len()];
        let mut r_var = z;
        let inv_b = 1.0 / rows as f32;
        let mut cb_terms = Vec::new();
        let mut commit_terms = Vec::new();
        let mut levels = Vec::new();
        for &bid in &self.book_ids {
            let book = self.store.get(bid).data();
            let codes: Vec<usize> = r.chunks_exact(zl).map(|p| nearest(p, book, zl).0).collect();
            let table = if self.ema.is_some() {
                g.frozen(&self.store, bid)
            } else {
                g.param(&self.store, bid)
            };
            let c = g.embedding(table, &codes)?;
            let r_const = g.constant(Tensor::new(vec![rows, zl], r.clone())?);
            let d = g.sub(r_const, c)?;
            cb_terms.push(sum_sq(g, d));
            let c_sg = g.stop_gradient(c);
            let d2 = g.sub(r_var, c_sg)?;
            commit_terms.push(sum_sq(g, d2));
            r_var = g.sub(r_var, c_sg)?;
            levels.push((codes.clone(), r.clone()));
            for (i, &code) in codes.iter().enumerate() {
                for k in 0..zl {
                    let cv = book[code * zl + k];
                    r[i * zl + k] -= cv;
                    q[i * zl + k] += cv;
                }
            }
        }
        let zq = straight_through(g, z, &q);
        let xh = self.decoder.forward(g, &self.store, zq)?;
        let diff = g.sub(xh, xv)?;
        let recon = sum_sq(g, diff);
        let recon = g.scale(recon, inv_b);
        let mut cb = cb_terms[0];
        for &t in &cb_terms[1..] {
            cb = g.add(cb, t)?;
        }
        let cb = g.scale(cb, inv_b);
        let mut cm = commit_terms[0];
        for &t in &commit_terms[1..] {
            cm = g.add(cm, t)?;
        }
        let cm = g.scale(cm, inv_b * self.beta as f32);
        let loss = g.add(recon, cb)?;
        let loss = g.add(loss, cm)?;
        Ok((loss, recon, cb, cm, levels))
    }

    fn sync_books(&mut self) -> Result<(), TokenizerError> {
        let levels = self
            .book_ids
            .iter()
            .map(|&id| self.store.get(id).data().to_vec())
            .collect();
        self.books = SidCodebooks::new(self.latent_dim, levels)?;
        Ok(())
    }
}

/// Loss components for `x` (`rows x dim`) under the current parameters.
pub fn rqvae_loss_terms(model: &RqVae, x: &[f32], rows: usize) -> Result<RqVaeLoss, TokenizerError> {
    let mut g = Graph::no_grad();
    let (loss, recon, cb, cm, _) = model.forward(&mut g, x, rows)?;
    let v = |t: Var| g.value(t).item() as f64;
    Ok(RqVaeLoss {
        recon: v(recon),
        codebook: v(cb),
        commit: v(cm),
        total: v(loss),
    })
}

/// Trains encoder, residual codebooks and decoder jointly. Codebooks start
/// from residual k-means on the initial latents.
pub fn train_rqvae(e: &EmbeddingMatrix, cfg: &SidConfig) -> Result<RqVae, TokenizerError> {
    let rc = &cfg.rqvae;
    if rc.batch_size == 0 {
        return Err(TokenizerError::InvalidConfig("batch_size must be positive".into()));
    }
    let dim = e.dim();
    let n = e.rows();
    let (store, encoder, decoder, latent) = RqVae::build(dim, rc, cfg.seed);
    let mut model = RqVae {
        store,
        encoder,
        decoder,
        book_ids: vec![],
        books: SidCodebooks::new(1, vec![vec![0.0]])?,
        dim,
        latent_dim: latent,
        loss_curve: vec![],
        beta: rc.beta_commit,
        frozen: rc.freeze_autoencoder,
        ema: match rc.codebook_update {
            CodebookUpdate::Gradient => None,
            CodebookUpdate::Ema { decay } => Some(decay),
        },
    };
    let z0 = model.encode_batch(e.data(), n)?;
    let (init, _) = train_residual_kmeans_raw(&z0, latent, cfg)?;
    for l in 0..init.num_levels() {
        let t = Tensor::new(vec![init.level_size(l), latent], init.level(l).to_vec())?;
        let id = model.store.add(format!("codebook.{l}"), t);
        model.book_ids.push(id);
    }
    model.sync_books()?;

    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: rc.lr,
            ..Default::default()
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..rc.epochs {
        let mut rng = rng_for(cfg.seed, "rqvae-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(rc.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            for &i in batch {
                x.extend_from_slice(e.row(i));
            }
            let (grads, loss, levels) = {
                let mut g = Graph::new();
                let (loss, _, _, _, levels) = model.forward(&mut g, &x, batch.len())?;
                let lv = g.value(loss).item() as f64;
                let mut buf = GradBuffer::zeros_like(&model.store);
                buf.accumulate(&g.backward(loss)?);
                if model.frozen {
                    for id in model.store.ids() {
                        if !model.book_ids.contains(&id) {
                            buf.get_mut(id).fill(0.0);
                        }
                    }
                }
                (buf, lv, levels)
            };
            if !loss.is_finite() {
                return Err(TokenizerError::Diverged { epoch });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut model.store, &grads)
                .map_err(|_| TokenizerError::Diverged { epoch })?;
            if let Some(decay) = model.ema {
                for (l, (codes, r)) in levels.iter().enumerate() {
                    let id = model.book_ids[l];
                    let w = model.store.get(id).rows();
                    let mut sums = vec![0.0f64; w * latent];
                    let mut counts = vec![0usize; w];
                    for (i, &c) in codes.iter().enumerate() {
                        counts[c] += 1;
                        for k in 0..latent {
                            sums[c * latent + k] += r[i * latent + k] as f64;
                        }
                    }
                    let book = model.store.get_mut(id).data_mut();
                    for c in 0..w {
                        if counts[c] > 0 {
                            for k in 0..latent {
                                let mean = sums[c * latent + k] / counts[c] as f64;
                                let old = book[c * latent + k] as f64;
                                book[c * latent + k] = (decay * old + (1.0 - decay) * mean) as f32;
                            }
                        }
                    }
                }
            }
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(TokenizerError::Diverged { epoch });
        }
        model.loss_curve.push(mean);
    }
    model.sync_books()?;
    Ok(model)
}
