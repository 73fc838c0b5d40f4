//! Prefix tree over valid token sequences and the flat SID token vocabulary.

use std::collections::BTreeMap;
use std::fmt::Debug;

use crate::tokenizer::{SidEntry, SidTable};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const NUM_SPECIAL: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TrieError {
    #[error("cannot build a trie from zero sequences")]
    Empty,
    #[error("sequence {index} is empty")]
    EmptySequence { index: usize },
    #[error("sequence {tokens:?} inserted twice (payloads {first} and {second})")]
    Duplicate {
        tokens: Vec<Token>,
        first: String,
        second: String,
    },
    #[error("code {code} out of range at level {level}")]
    CodeOutOfRange { level: usize, code: usize },
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<Token, usize>,
    terminal: Option<usize>,
}

/// Immutable prefix tree; terminals carry a payload.
#[derive(Debug, Clone)]
pub struct SequenceTrie<P = String> {
    nodes: Vec<Node>,
    payloads: Vec<P>,
}

impl<P: Clone + Debug> SequenceTrie<P> {
    pub fn build<I>(sequences: I) -> Result<Self, TrieError>
    where
        I: IntoIterator<Item = (Vec<Token>, P)>,
    {
        let mut nodes = vec![Node::default()];
        let mut payloads: Vec<P> = Vec::new();
        for (index, (seq, payload)) in sequences.into_iter().enumerate() {
            if seq.is_empty() {
                return Err(TrieError::EmptySequence { index });
            }
            let mut cur = 0;
            for &t in &seq {
                let next = nodes.len();
                cur = *nodes[cur].children.entry(t).or_insert(next);
                if cur == next {
                    nodes.push(Node::default());
                }
            }
            if let Some(prev) = nodes[cur].terminal {
                return Err(TrieError::Duplicate {
                    tokens: seq,
                    first: format!("{:?}", payloads[prev]),
                    second: format!("{payload:?}"),
                });
            }
            nodes[cur].terminal = Some(payloads.len());
            payloads.push(payload);
        }
        if payloads.is_empty() {
            return Err(TrieError::Empty);
        }
        Ok(Self { nodes, payloads })
    }

    fn walk(&self, prefix: &[Token]) -> Option<usize> {
        let mut cur = 0;
        for t in prefix {
            cur = *self.nodes[cur].children.get(t)?;
        }
        Some(cur)
    }

    /// Children of the node reached by `prefix`, ascending; empty when
    /// `prefix` leaves the trie.
    pub fn get_allowed_next_tokens(&self, prefix: &[Token]) -> Vec<Token> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn is_valid_sequence(&self, tokens: &[Token]) -> bool {
        self.walk(tokens)
            .is_some_and(|n| self.nodes[n].terminal.is_some())
    }

    pub fn payload(&self, tokens: &[Token]) -> Option<&P> {
        self.walk(tokens)
            .and_then(|n| self.nodes[n].terminal)
            .map(|i| &self.payloads[i])
    }

    pub fn num_sequences(&self) -> usize {
        self.payloads.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// All stored sequences in lexicographic order.
    pub fn sequences(&self) -> Vec<(Vec<Token>, &P)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if let Some(p) = self.nodes[n].terminal {
                out.push((path.clone(), &self.payloads[p]));
            }
            for (&t, &c) in self.nodes[n].children.iter().rev() {
                let mut q = path.clone();
                q.push(t);
                stack.push((c, q));
            }
        }
        out
    }
}

/// Token layout: `PAD, BOS, EOS`, then each level's codes, then collision digits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidVocab {
    level_sizes: Vec<usize>,
    offsets: Vec<usize>,
    disambig_size: usize,
}

impl SidVocab {
    pub fn new(level_sizes: Vec<usize>, disambig_size: usize) -> Self {
        let mut offsets = Vec::with_capacity(level_sizes.len() + 1);
        let mut off = NUM_SPECIAL;
        for &w in &level_sizes {
            offsets.push(off);
            off += w;
        }
        offsets.push(off);
        Self {
            level_sizes,
            offsets,
            disambig_size: disambig_size.max(1),
        }
    }

    pub fn for_table(table: &SidTable) -> Self {
        Self::new(table.level_sizes.clone(), table.disambig_size())
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Tokens per item: one per level plus the collision digit.
    pub fn item_len(&self) -> usize {
        self.level_sizes.len() + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.offsets[self.level_sizes.len()] + self.disambig_size
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn disambig_size(&self) -> usize {
        self.disambig_size
    }

    pub fn token(&self, level: usize, code: usize) -> Token {
        (self.offsets[level] + code) as Token
    }

    pub fn disambig_token(&self, digit: usize) -> Token {
        (self.offsets[self.level_sizes.len()] + digit) as Token
    }

    pub fn encode(&self, entry: &SidEntry) -> Result<Vec<Token>, TrieError> {
        let mut out = Vec::with_capacity(self.item_len());
        for (l, &c) in entry.codes.iter().enumerate() {
            if l >= self.level_sizes.len() || c >= self.level_sizes[l] {
                return Err(TrieError::CodeOutOfRange { level: l, code: c });
            }
            out.push(self.token(l, c));
        }
        if entry.disambig >= self.disambig_size {
            return Err(TrieError::CodeOutOfRange {
                level: self.level_sizes.len(),
                code: entry.disambig,
            });
        }
        out.push(self.disambig_token(entry.disambig));
        Ok(out)
    }

    /// Trie over every item's token sequence with item ids as payloads.
    pub fn build_trie(&self, table: &SidTable) -> Result<SequenceTrie<String>, TrieError> {
        let seqs = table
            .entries
            .iter()
            .map(|e| Ok((self.encode(e)?, e.item_id.clone())))
            .collect::<Result<Vec<_>, TrieError>>()?;
        SequenceTrie::build(seqs)
    }
}
