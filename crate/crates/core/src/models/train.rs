//! Training loops, evaluation and learning-rate selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sasrec::Sasrec;
use super::tiger::Tiger;
use super::{role_pairs, ItemIndex, ModelError, SidCatalog};
use crate::autodiff::{AdamW, AdamWConfig, GradBuffer, Graph, ParamStore, Scalar};
use crate::corpus::{Role, SplitAssignment};
use crate::decode::next_item_candidates;
use crate::eval::{evaluate, EvalReport};
use crate::util::rng_for;

/// One `(history, target)` pair in catalogue indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user_id: String,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Pairs of one split role, indexed by catalogue position.
pub fn tiger_examples(split: &SplitAssignment, role: Role, catalog: &SidCatalog) -> Result<Vec<Example>, ModelError> {
    examples(split, role, |s| catalog.index_of(s))
}

pub fn sasrec_examples(split: &SplitAssignment, role: Role, index: &ItemIndex) -> Result<Vec<Example>, ModelError> {
    examples(split, role, |s| index.get(s))
}

fn examples(
    split: &SplitAssignment,
    role: Role,
    lookup: impl Fn(&str) -> Option<usize>,
) -> Result<Vec<Example>, ModelError> {
    Ok(role_pairs(split, role, lookup)?
        .into_iter()
        .map(|(user_id, history, target)| Example {
            user_id,
            history,
            target,
        })
        .collect())
}

/// The longest training sequence of each user, in first-seen user order.
pub fn sasrec_sequences(train: &[Example]) -> Vec<Vec<usize>> {
    let mut order = Vec::new();
    let mut best: BTreeMap<&str, &Example> = BTreeMap::new();
    for e in train {
        match best.get(e.user_id.as_str()) {
            Some(b) if b.history.len() >= e.history.len() => {}
            prev => {
                if prev.is_none() {
                    order.push(e.user_id.as_str());
                }
                best.insert(&e.user_id, e);
            }
        }
    }
    order
        .into_iter()
        .map(|u| {
            let e = best[u];
            let mut s = e.history.clone();
            s.push(e.target);
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Validate on at most this many examples; `None` uses all.
    pub eval_users: Option<usize>,
    pub eval_k: usize,
    /// Validate every this many epochs and after the last; 0 only after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
            eval_users: Some(500),
            eval_k: 5,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.eval_k == 0 {
            return Err(ModelError::InvalidConfig("batch_size and eval_k must be positive".into()));
        }
        Ok(())
    }

    fn evaluates_at(&self, epoch: usize) -> bool {
        epoch + 1 == self.epochs || (self.eval_every > 0 && (epoch + 1) % self.eval_every == 0)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "valid_recall@5")]
    pub valid_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lr: f64,
    pub steps: usize,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn final_valid_recall(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.valid_recall)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Shared minibatch loop: shuffles per epoch, applies AdamW, validates.
fn run_epochs<T, M>(
    model: &mut M,
    data: &[T],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport, ModelError>
where
    M: Trainable<T>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut opt = AdamW::new(model.store(), cfg.optimizer);
    let mut buf = GradBuffer::zeros_like(model.store());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        lr: cfg.optimizer.lr,
        steps: 0,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        let (mut total, mut weight) = (0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&T> = chunk.iter().map(|&i| &data[i]).collect();
            let mut rng = rng_for(cfg.seed, "dropout", report.steps as u64);
            let (loss, w) = {
                let mut g = Graph::new();
                let (loss, w) = model.loss(&mut g, &batch, Some(&mut rng))?;
                let lv = g.value(loss).item().f64();
                if !lv.is_finite() {
                    return Err(ModelError::NonFiniteLoss { epoch, step });
                }
                let grads = g.backward(loss)?;
                buf.clear();
                buf.accumulate(&grads);
                (lv, w)
            };
            opt.step(model.store_mut(), &buf)
                .map_err(|_| ModelError::NonFiniteLoss { epoch, step })?;
            total += loss * w;
            weight += w;
            report.steps += 1;
        }
        let valid_recall = if cfg.evaluates_at(epoch) {
            model.validate(cfg)?
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            loss: total / weight,
            valid_recall,
        };
        on_epoch(&m);
        report.epochs.push(m);
    }
    Ok(report)
}

trait Trainable<T> {
    type F: Scalar;
    /// Batch loss and the number of targets it averages over.
    fn loss<'p>(
        &'p self,
        g: &mut Graph<'p, Self::F>,
        batch: &[&T],
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<(crate::autodiff::Var, f64), ModelError>;
    fn validate(&self, cfg: &TrainConfig) -> Result<Option<f64>, ModelError>;
    fn store(&self) -> &ParamStore<Self::F>;
    fn store_mut(&mut self) -> &mut ParamStore<Self::F>;
}

struct TigerRun<'a, F: Scalar> {
    model: &'a mut Tiger<F>,
    catalog: &'a SidCatalog,
    valid: &'a [Example],
}

impl<F: Scalar> Trainable<Example> for TigerRun<'_, F> {
    type F = F;

    fn loss<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        batch: &[&Example],
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<(crate::autodiff::Var, f64), ModelError> {
        let owned: Vec<Example> = batch.iter().map(|e| (*e).clone()).collect();
        let loss = self.model.batch_loss(g, self.catalog, &owned, rng)?;
        Ok((loss, (owned.len() * self.catalog.item_len()) as f64))
    }

    fn store(&self) -> &ParamStore<F> {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.model.store
    }

    fn validate(&self, cfg: &TrainConfig) -> Result<Option<f64>, ModelError> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        let n = cfg.eval_users.unwrap_or(usize::MAX).min(self.valid.len());
        let r = evaluate_tiger(self.model, self.catalog, &self.valid[..n], &[cfg.eval_k])?;
        Ok(r.recall_at(cfg.eval_k))
    }
}

/// Teacher-forced training over the L+1 target tokens of each example.
pub fn train_tiger<F: Scalar>(
    model: &mut Tiger<F>,
    catalog: &SidCatalog,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport, ModelError> {
    model.check_catalog(catalog)?;
    let mut run = TigerRun { model, catalog, valid };
    run_epochs(&mut run, train, cfg, on_epoch)
}

struct SasrecRun<'a, F: Scalar> {
    model: &'a mut Sasrec<F>,
    valid: &'a [Example],
}

impl<F: Scalar> Trainable<Vec<usize>> for SasrecRun<'_, F> {
    type F = F;

    fn loss<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        batch: &[&Vec<usize>],
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<(crate::autodiff::Var, f64), ModelError> {
        let owned: Vec<Vec<usize>> = batch.iter().map(|s| (*s).clone()).collect();
        let w = owned
            .iter()
            .map(|s| s.len().min(self.model.cfg.max_positions + 1) - 1)
            .sum::<usize>();
        Ok((self.model.batch_loss(g, &owned, rng)?, w as f64))
    }

    fn store(&self) -> &ParamStore<F> {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.model.store
    }

    fn validate(&self, cfg: &TrainConfig) -> Result<Option<f64>, ModelError> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        let n = cfg.eval_users.unwrap_or(usize::MAX).min(self.valid.len());
        let r = evaluate_sasrec(self.model, &self.valid[..n], &[cfg.eval_k])?;
        Ok(r.recall_at(cfg.eval_k))
    }
}

/// Trains on full sequences (at least two items each), predicting every next item.
pub fn train_sasrec<F: Scalar>(
    model: &mut Sasrec<F>,
    sequences: &[Vec<usize>],
    valid: &[Example],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport, ModelError> {
    if let Some(&bad) = sequences.iter().flatten().find(|&&i| i >= model.cfg.item_count) {
        return Err(ModelError::UnknownItem(format!("index {bad}")));
    }
    let seqs: Vec<Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).cloned().collect();
    let mut run = SasrecRun { model, valid };
    run_epochs(&mut run, &seqs, cfg, on_epoch)
}

/// Beam-decoded rankings of the top `max(ks)` items per example.
pub fn evaluate_tiger<F: Scalar>(
    model: &Tiger<F>,
    catalog: &SidCatalog,
    examples: &[Example],
    ks: &[usize],
) -> Result<EvalReport, ModelError> {
    let rankings = tiger_rankings(model, catalog, examples, ks.iter().copied().max().unwrap_or(1))?;
    report(examples, &rankings, ks)
}

pub fn tiger_rankings<F: Scalar>(
    model: &Tiger<F>,
    catalog: &SidCatalog,
    examples: &[Example],
    k: usize,
) -> Result<Vec<Vec<usize>>, ModelError> {
    model.check_catalog(catalog)?;
    examples
        .par_iter()
        .map(|e| {
            let ctx = model.encode_context(catalog, &e.history)?;
            let cands = next_item_candidates(&ctx, &[], catalog.trie(), catalog.item_len(), k)?;
            cands
                .into_iter()
                .map(|(id, _)| catalog.index_of(&id).ok_or(ModelError::UnknownItem(id)))
                .collect()
        })
        .collect()
}

pub fn evaluate_sasrec<F: Scalar>(model: &Sasrec<F>, examples: &[Example], ks: &[usize]) -> Result<EvalReport, ModelError> {
    let k = ks.iter().copied().max().unwrap_or(1);
    let rankings = examples
        .par_iter()
        .map(|e| {
            let s = model.scores(&e.history)?;
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx.truncate(k);
            Ok(idx)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    report(examples, &rankings, ks)
}

fn report(examples: &[Example], rankings: &[Vec<usize>], ks: &[usize]) -> Result<EvalReport, ModelError> {
    let users: Vec<String> = examples.iter().map(|e| e.user_id.clone()).collect();
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    evaluate(&users, rankings, &targets, ks).map_err(|e| ModelError::InvalidConfig(e.to_string()))
}

/// Trains one candidate per learning rate and keeps the best valid score.
/// Ties go to the earlier grid entry.
pub fn select_lr<M>(
    grid: &[f64],
    mut run: impl FnMut(f64) -> Result<(M, f64), ModelError>,
) -> Result<(f64, M, Vec<(f64, f64)>), ModelError> {
    let mut best: Option<(f64, M, f64)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lr in grid {
        let (m, score) = run(lr)?;
        scores.push((lr, score));
        if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
            best = Some((lr, m, score));
        }
    }
    let (lr, m, _) = best.ok_or_else(|| ModelError::InvalidConfig("empty learning-rate grid".into()))?;
    Ok((lr, m, scores))
}
