//! Trainable sequence recommenders and embedding adapters.

mod adapter;
pub mod layers;
mod sasrec;
mod tiger;
mod train;

use std::collections::HashMap;

pub use adapter::{attach_adapter, Adapter, AdapterConfig, AdapterMode, AdapterSource};
pub use sasrec::{build_sasrec, Sasrec, SasrecConfig};
pub use tiger::{build_tiger, EncodedContext, Seq2SeqConfig, Tiger};
pub use train::{
    evaluate_sasrec, evaluate_tiger, sasrec_examples, sasrec_sequences, select_lr, tiger_examples, tiger_rankings,
    train_sasrec, train_tiger, EpochMetrics, Example, TrainConfig, TrainReport,
};

use crate::corpus::{Role, SplitAssignment};
use crate::tokenizer::SidTable;
use crate::trie::{SequenceTrie, SidVocab, Token, TrieError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("config vocab_size {config} does not match the SID vocabulary ({sids})")]
    VocabMismatch { config: usize, sids: usize },
    #[error("item {0} has no SID or embedding row")]
    UnknownItem(String),
    #[error("adapter expects {expected}-dimensional inputs, got {got}")]
    AdapterDimension { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Decode(#[from] crate::decode::DecodeError),
    #[error(transparent)]
    Trie(#[from] TrieError),
}

/// Every catalogue item with its SID tokens and the decoding trie.
#[derive(Debug, Clone)]
pub struct SidCatalog {
    pub vocab: SidVocab,
    item_ids: Vec<String>,
    tokens: Vec<Vec<Token>>,
    index: HashMap<String, usize>,
    trie: SequenceTrie<String>,
}

impl SidCatalog {
    pub fn new(table: &SidTable) -> Result<Self, ModelError> {
        let vocab = SidVocab::for_table(table);
        let mut item_ids = Vec::with_capacity(table.entries.len());
        let mut tokens = Vec::with_capacity(table.entries.len());
        for e in &table.entries {
            item_ids.push(e.item_id.clone());
            tokens.push(vocab.encode(e)?);
        }
        let index = item_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let trie = vocab.build_trie(table)?;
        Ok(Self {
            vocab,
            item_ids,
            tokens,
            index,
            trie,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.item_ids[i]
    }

    pub fn tokens(&self, i: usize) -> &[Token] {
        &self.tokens[i]
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn trie(&self) -> &SequenceTrie<String> {
        &self.trie
    }

    /// Tokens per item, including the collision digit.
    pub fn item_len(&self) -> usize {
        self.vocab.item_len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.vocab_size()
    }
}

/// Maps item ids to dense indices for models that score raw item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemIndex {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemIndex {
    pub fn new(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// `(history, target)` index pairs for one split role.
pub fn role_pairs(
    split: &SplitAssignment,
    role: Role,
    lookup: impl Fn(&str) -> Option<usize>,
) -> Result<Vec<(String, Vec<usize>, usize)>, ModelError> {
    split
        .role(role)
        .map(|r| {
            let idx = |s: &str| lookup(s).ok_or_else(|| ModelError::UnknownItem(s.to_string()));
            let history = r.history.iter().map(|h| idx(h)).collect::<Result<Vec<_>, _>>()?;
            Ok((r.user_id.clone(), history, idx(&r.target)?))
        })
        .collect()
}

#[cfg(test)]
mod tests;
