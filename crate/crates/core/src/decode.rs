//! Trie-constrained beam search over any next-token model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::trie::{SequenceTrie, Token, EOS};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("model produced a non-finite logit for token {token} at step {step}")]
    NonFiniteLogits { step: usize, token: usize },
    #[error("beam width and max_new_tokens must be positive")]
    InvalidConfig,
    #[error("decoded sequence {0:?} has no payload")]
    MissingPayload(Vec<Token>),
    #[error("model: {0}")]
    Model(String),
}

/// Anything that scores the next token given a context and a generated prefix.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;

    fn next_token_logits(&self, context: &[Token], generated: &[Token]) -> Result<Vec<f64>, DecodeError>;

    /// Logits for several prefixes sharing one context.
    fn next_token_logits_batch(
        &self,
        context: &[Token],
        generated: &[&[Token]],
    ) -> Result<Vec<Vec<f64>>, DecodeError> {
        generated
            .iter()
            .map(|g| self.next_token_logits(context, g))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    /// Generated suffix only; the context is not repeated here.
    pub sequence: Vec<Token>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Rank by `score / len^alpha` instead of the raw sum.
    pub length_penalty: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            max_new_tokens: 5,
            length_penalty: None,
        }
    }
}

fn rank_key(b: &BeamState, penalty: Option<f64>) -> f64 {
    match penalty {
        Some(alpha) => b.score / (b.sequence.len().max(1) as f64).powf(alpha),
        None => b.score,
    }
}

/// Higher score first, then shorter, then lexicographically smaller.
fn order(a: &BeamState, b: &BeamState, penalty: Option<f64>) -> Ordering {
    rank_key(b, penalty)
        .total_cmp(&rank_key(a, penalty))
        .then(a.sequence.len().cmp(&b.sequence.len()))
        .then_with(|| a.sequence.cmp(&b.sequence))
}

/// `x - logsumexp(x[allowed])` for the allowed tokens.
fn masked_log_softmax(logits: &[f64], allowed: &[Token]) -> Vec<f64> {
    let m = allowed
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = allowed.iter().map(|&t| (logits[t as usize] - m).exp()).sum();
    let lse = m + s.ln();
    allowed.iter().map(|&t| logits[t as usize] - lse).collect()
}

pub fn constrained_beam_search<M: NextTokenModel + ?Sized, P: Clone + std::fmt::Debug>(
    model: &M,
    context: &[Token],
    trie: &SequenceTrie<P>,
    cfg: &DecodeConfig,
) -> Result<Vec<BeamState>, DecodeError> {
    if cfg.beam_width == 0 || cfg.max_new_tokens == 0 {
        return Err(DecodeError::InvalidConfig);
    }
    let mut beams = vec![BeamState {
        sequence: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    for step in 0..cfg.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let live: Vec<&[Token]> = beams
            .iter()
            .filter(|b| !b.finished)
            .map(|b| b.sequence.as_slice())
            .collect();
        let logits = model.next_token_logits_batch(context, &live)?;
        let mut next_logits = logits.into_iter();
        let mut candidates = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let logits = next_logits.next().expect("one row per live beam");
            if let Some(token) = logits.iter().position(|x| !x.is_finite()) {
                return Err(DecodeError::NonFiniteLogits { step, token });
            }
            let mut allowed = trie.get_allowed_next_tokens(&beam.sequence);
            if trie.is_valid_sequence(&beam.sequence) {
                allowed.push(EOS);
            }
            if allowed.is_empty() {
                allowed.push(EOS);
            }
            allowed.retain(|&t| (t as usize) < logits.len());
            for (&t, lp) in allowed.iter().zip(masked_log_softmax(&logits, &allowed)) {
                let mut sequence = beam.sequence.clone();
                sequence.push(t);
                candidates.push(BeamState {
                    sequence,
                    score: beam.score + lp,
                    finished: t == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| order(a, b, cfg.length_penalty));
        candidates.truncate(cfg.beam_width);
        beams = candidates;
    }
    for b in &mut beams {
        if b.sequence.last() == Some(&EOS) {
            b.sequence.pop();
        }
    }
    beams.sort_by(|a, b| order(a, b, cfg.length_penalty));
    Ok(beams)
}

/// Top-`k` catalogue items for a context, best first.
pub fn next_item_candidates<M: NextTokenModel + ?Sized>(
    model: &M,
    context: &[Token],
    trie: &SequenceTrie<String>,
    item_len: usize,
    k: usize,
) -> Result<Vec<(String, f64)>, DecodeError> {
    let cfg = DecodeConfig {
        beam_width: k,
        max_new_tokens: item_len + 1,
        length_penalty: None,
    };
    constrained_beam_search(model, context, trie, &cfg)?
        .into_iter()
        .map(|b| {
            trie.payload(&b.sequence)
                .map(|p| (p.clone(), b.score))
                .ok_or(DecodeError::MissingPayload(b.sequence))
        })
        .collect()
}

/// One line of batch decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub user_id: String,
    pub ranked_items: Vec<String>,
    pub scores: Vec<f64>,
}
