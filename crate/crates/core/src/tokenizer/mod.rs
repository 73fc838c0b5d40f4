//! Semantic IDs via residual quantization of item embeddings.

mod io;
pub mod kmeans;
mod rqvae;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::embed::EmbeddingMatrix;
use crate::util::rng_for;

pub use io::{read_assignments, read_codebooks, write_assignments, write_codebooks};
pub use kmeans::{kmeans, nearest, sq_dist, KmeansResult};
pub use rqvae::{rqvae_loss_terms, train_rqvae, CodebookUpdate, RqVae, RqVaeConfig, RqVaeLoss};

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("input has dimension {got}, codebooks expect {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot fit {centroids} centroids to {points} distinct points")]
    TooFewPoints { points: usize, centroids: usize },
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("RQ-VAE loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("codebook level {level} is invalid: {reason}")]
    InvalidCodebook { level: usize, reason: String },
    #[error("malformed codebook or assignment file: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainer {
    #[default]
    ResidualKmeans,
    RqVae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SidConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    /// Per-level sizes; overrides `codebook_size` when present.
    pub level_sizes: Option<Vec<usize>>,
    /// Shrink a level to the number of distinct points it sees instead of failing.
    pub cap_to_distinct: bool,
    pub trainer: Trainer,
    pub seed: u64,
    pub iters: usize,
    pub rqvae: RqVaeConfig,
}

impl Default for SidConfig {
    fn default() -> Self {
        Self {
            num_codebooks: 3,
            codebook_size: 256,
            level_sizes: None,
            cap_to_distinct: true,
            trainer: Trainer::ResidualKmeans,
            seed: 0,
            iters: 50,
            rqvae: RqVaeConfig::default(),
        }
    }
}

impl SidConfig {
    pub fn sizes(&self) -> Result<Vec<usize>, TokenizerError> {
        let sizes = match &self.level_sizes {
            Some(s) => s.clone(),
            None => vec![self.codebook_size; self.num_codebooks],
        };
        if sizes.is_empty() || sizes.iter().any(|&w| w < 2) {
            return Err(TokenizerError::InvalidConfig(format!(
                "need L >= 1 levels of size >= 2, got {sizes:?}"
            )));
        }
        Ok(sizes)
    }
}

/// `L` codebooks; level `l` holds `sizes[l]` codewords of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SidCodebooks {
    dim: usize,
    levels: Vec<Vec<f32>>,
}

impl SidCodebooks {
    pub fn new(dim: usize, levels: Vec<Vec<f32>>) -> Result<Self, TokenizerError> {
        if dim == 0 || levels.is_empty() {
            return Err(TokenizerError::InvalidConfig("empty codebooks".into()));
        }
        for (l, lv) in levels.iter().enumerate() {
            if lv.is_empty() || lv.len() % dim != 0 {
                return Err(TokenizerError::InvalidCodebook {
                    level: l,
                    reason: format!("{} values is not a multiple of dim {dim}", lv.len()),
                });
            }
            if lv.iter().any(|x| !x.is_finite()) {
                return Err(TokenizerError::InvalidCodebook {
                    level: l,
                    reason: "non-finite codeword".into(),
                });
            }
        }
        Ok(Self { dim, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_size(&self, l: usize) -> usize {
        self.levels[l].len() / self.dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.num_levels()).map(|l| self.level_size(l)).collect()
    }

    pub fn level(&self, l: usize) -> &[f32] {
        &self.levels[l]
    }

    pub fn codeword(&self, l: usize, j: usize) -> &[f32] {
        &self.levels[l][j * self.dim..(j + 1) * self.dim]
    }

    /// Smallest distance between two codewords of the same level.
    pub fn min_intra_level_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for l in 0..self.num_levels() {
            let w = self.level_size(l);
            for a in 0..w {
                for b in a + 1..w {
                    best = best.min(sq_dist(self.codeword(l, a), self.codeword(l, b)).sqrt());
                }
            }
        }
        best
    }
}

/// Result of quantizing one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub codes: Vec<usize>,
    /// `||r^(l)||` for `l = 0..=L` (input norm first, final residual last).
    pub residual_norms: Vec<f64>,
    /// Sum of the selected codewords, accumulated in level order in `f32`.
    pub reconstruction: Vec<f32>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Greedy residual quantization of `h`.
pub fn assign(h: &[f32], books: &SidCodebooks) -> Result<Assignment, TokenizerError> {
    if h.len() != books.dim {
        return Err(TokenizerError::DimensionMismatch {
            expected: books.dim,
            got: h.len(),
        });
    }
    let mut r = h.to_vec();
    let mut recon = vec![0.0f32; h.len()];
    let mut codes = Vec::with_capacity(books.num_levels());
    let mut residual_norms = vec![norm(&r)];
    for l in 0..books.num_levels() {
        let (j, _) = nearest(&r, books.level(l), books.dim);
        let c = books.codeword(l, j);
        for i in 0..r.len() {
            r[i] -= c[i];
            recon[i] += c[i];
        }
        codes.push(j);
        residual_norms.push(norm(&r));
    }
    Ok(Assignment {
        codes,
        residual_norms,
        reconstruction: recon,
    })
}

#[derive(Debug, Clone)]
pub struct ResidualKmeansTrace {
    /// Per level, the Lloyd objective after each assignment step.
    pub levels: Vec<Vec<f64>>,
}

/// Residual k-means: level `l` clusters the residuals left by levels `< l`.
pub fn train_residual_kmeans(
    e: &EmbeddingMatrix,
    cfg: &SidConfig,
) -> Result<(SidCodebooks, ResidualKmeansTrace), TokenizerError> {
    train_residual_kmeans_raw(e.data(), e.dim(), cfg)
}

pub fn train_residual_kmeans_raw(
    points: &[f32],
    dim: usize,
    cfg: &SidConfig,
) -> Result<(SidCodebooks, ResidualKmeansTrace), TokenizerError> {
    let sizes = cfg.sizes()?;
    if cfg.iters == 0 {
        return Err(TokenizerError::InvalidConfig("iters must be positive".into()));
    }
    let n = points.len() / dim;
    let mut residual = points.to_vec();
    let mut levels = Vec::with_capacity(sizes.len());
    let mut trace = Vec::with_capacity(sizes.len());
    for (l, &w) in sizes.iter().enumerate() {
        let k = if cfg.cap_to_distinct {
            w.min(kmeans::distinct_rows(&residual, dim))
        } else {
            if n < w {
                return Err(TokenizerError::TooFewPoints { points: n, centroids: w });
            }
            w
        };
        let mut rng = rng_for(cfg.seed, "kmeans-level", l as u64);
        let km = kmeans(&residual, dim, k, cfg.iters, &mut rng)?;
        for (i, &lab) in km.labels.iter().enumerate() {
            let c = &km.centroids[lab * dim..(lab + 1) * dim];
            for (x, &cv) in residual[i * dim..(i + 1) * dim].iter_mut().zip(c) {
                *x -= cv;
            }
        }
        trace.push(km.trace);
        levels.push(km.centroids);
    }
    Ok((SidCodebooks::new(dim, levels)?, ResidualKmeansTrace { levels: trace }))
}

/// One item's full SID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidEntry {
    pub item_id: String,
    pub codes: Vec<usize>,
    pub disambig: usize,
}

/// Appends a collision digit: items sharing a code tuple are numbered in
/// sorted item-id order. Output keeps input order.
pub fn disambiguate(assignments: &[(String, Vec<usize>)]) -> Vec<SidEntry> {
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (i, (_, codes)) in assignments.iter().enumerate() {
        groups.entry(codes.as_slice()).or_default().push(i);
    }
    let mut digit = vec![0; assignments.len()];
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| assignments[a].0.cmp(&assignments[b].0));
        for (d, &i) in members.iter().enumerate() {
            digit[i] = d;
        }
    }
    assignments
        .iter()
        .zip(digit)
        .map(|((id, codes), disambig)| SidEntry {
            item_id: id.clone(),
            codes: codes.clone(),
            disambig,
        })
        .collect()
}

/// Disambiguated SIDs for a catalogue plus the shape of their token space.
#[derive(Debug, Clone, PartialEq)]
pub struct SidTable {
    pub level_sizes: Vec<usize>,
    pub entries: Vec<SidEntry>,
}

impl SidTable {
    pub fn new(level_sizes: Vec<usize>, entries: Vec<SidEntry>) -> Self {
        Self { level_sizes, entries }
    }

    /// Size of the collision-digit alphabet (largest collision group).
    pub fn disambig_size(&self) -> usize {
        self.entries.iter().map(|e| e.disambig + 1).max().unwrap_or(1)
    }

    pub fn get(&self, item_id: &str) -> Option<&SidEntry> {
        self.entries.iter().find(|e| e.item_id == item_id)
    }

    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.item_id.as_str(), i))
            .collect()
    }
}

/// Everything produced by [`tokenize`].
#[derive(Debug, Clone)]
pub struct Tokenized {
    pub books: SidCodebooks,
    pub rqvae: Option<RqVae>,
    pub table: SidTable,
}

impl Tokenized {
    /// Vector that gets quantized for an item embedding (the RQ-VAE latent
    /// when that trainer is used).
    pub fn quantizer_input(&self, h: &[f32]) -> Result<Vec<f32>, TokenizerError> {
        match &self.rqvae {
            Some(m) => m.encode(h),
            None => Ok(h.to_vec()),
        }
    }
}

/// Trains codebooks, assigns every item and disambiguates collisions.
pub fn tokenize(e: &EmbeddingMatrix, cfg: &SidConfig) -> Result<Tokenized, TokenizerError> {
    let (books, rq) = match cfg.trainer {
        Trainer::ResidualKmeans => (train_residual_kmeans(e, cfg)?.0, None),
        Trainer::RqVae => {
            let m = train_rqvae(e, cfg)?;
            (m.books.clone(), Some(m))
        }
    };
    let mut raw = Vec::with_capacity(e.rows());
    for (i, id) in e.item_ids().iter().enumerate() {
        let x = match &rq {
            Some(m) => m.encode(e.row(i))?,
            None => e.row(i).to_vec(),
        };
        raw.push((id.clone(), assign(&x, &books)?.codes));
    }
    let table = SidTable::new(books.sizes(), disambiguate(&raw));
    Ok(Tokenized {
        books,
        rqvae: rq,
        table,
    })
}
