//! Per-item dense embeddings: binary file I/O and a seeded cluster-structured generator.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemCorpus;
use crate::util::{read_jsonl, rng_for, stable_hash, write_jsonl};

const MAGIC: &[u8; 6] = b"GREMB1";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("not an embedding file (bad magic)")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no embedding row for item {0}")]
    MissingItem(String),
    #[error("embedding index references item {0} that is not in the corpus")]
    UnknownItem(String),
    #[error("non-finite value at row {row} (item {item_id}), column {col}")]
    NonFinite {
        item_id: String,
        row: usize,
        col: usize,
    },
    #[error("index line {line}: {reason}")]
    BadIndex { line: usize, reason: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Row-major `f32` matrix keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    item_ids: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    item_id: String,
    row: usize,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, item_ids: Vec<String>, data: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 || data.len() != dim * item_ids.len() {
            return Err(EmbedError::DimensionMismatch(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                item_ids.len()
            )));
        }
        if let Some(p) = data.iter().position(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite {
                item_id: item_ids[p / dim].clone(),
                row: p / dim,
                col: p % dim,
            });
        }
        let index = item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            dim,
            data,
            item_ids,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.item_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, item_id: &str) -> Option<&[f32]> {
        self.index.get(item_id).map(|&i| self.row(i))
    }

    pub fn row_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Scales every row to unit Euclidean norm; zero rows are left alone.
    pub fn l2_normalize(&mut self) {
        for r in self.data.chunks_mut(self.dim) {
            let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn write_index<W: Write>(&self, w: W) -> std::io::Result<()> {
        let lines: Vec<IndexLine> = self
            .item_ids
            .iter()
            .enumerate()
            .map(|(row, id)| IndexLine {
                item_id: id.clone(),
                row,
            })
            .collect();
        write_jsonl(w, &lines)
    }

    /// Writes `<path>` and its index next to it (see [`index_path`]).
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| EmbedError::Io { path: p, source }
        };
        self.write_binary(BufWriter::new(File::create(path).map_err(io(path))?))
            .map_err(io(path))?;
        let ip = index_path(path);
        self.write_index(BufWriter::new(File::create(&ip).map_err(io(&ip))?))
            .map_err(io(&ip))
    }
}

/// Index file conventionally stored beside the binary: `x.bin` -> `x.index.jsonl`.
pub fn index_path(bin: &Path) -> PathBuf {
    bin.with_extension("index.jsonl")
}

/// Parses a binary matrix and its index, then checks coverage against `corpus`.
pub fn read_embeddings<R: Read, I: BufRead>(
    mut bin: R,
    index: I,
    corpus: &ItemCorpus,
) -> Result<EmbeddingMatrix, EmbedError> {
    let io = |source| EmbedError::Io {
        path: PathBuf::from("<embeddings>"),
        source,
    };
    let mut magic = [0u8; 6];
    bin.read_exact(&mut magic).map_err(|_| EmbedError::BadMagic)?;
    if &magic != MAGIC {
        return Err(EmbedError::BadMagic);
    }
    let mut hdr = [0u8; 8];
    bin.read_exact(&mut hdr)
        .map_err(|_| EmbedError::DimensionMismatch("truncated header".into()))?;
    let rows = u32::from_le_bytes(hdr[..4].try_into().expect("4")) as usize;
    let dim = u32::from_le_bytes(hdr[4..].try_into().expect("4")) as usize;
    let mut body = Vec::new();
    bin.read_to_end(&mut body).map_err(io)?;
    if dim == 0 || body.len() != rows * dim * 4 {
        return Err(EmbedError::DimensionMismatch(format!(
            "header declares {rows} x {dim} but payload holds {} floats",
            body.len() / 4
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
        .collect();

    let lines: Vec<IndexLine> =
        read_jsonl(index).map_err(|(line, reason)| EmbedError::BadIndex { line, reason })?;
    let mut ids: Vec<Option<String>> = vec![None; rows];
    for (i, l) in lines.into_iter().enumerate() {
        if !corpus.contains(&l.item_id) {
            return Err(EmbedError::UnknownItem(l.item_id));
        }
        let slot = ids.get_mut(l.row).ok_or_else(|| EmbedError::BadIndex {
            line: i + 1,
            reason: format!("row {} out of range for {rows} rows", l.row),
        })?;
        if slot.is_some() {
            return Err(EmbedError::BadIndex {
                line: i + 1,
                reason: format!("row {} listed twice", l.row),
            });
        }
        *slot = Some(l.item_id);
    }
    let mut item_ids = Vec::with_capacity(rows);
    for (row, id) in ids.into_iter().enumerate() {
        item_ids.push(id.ok_or_else(|| EmbedError::BadIndex {
            line: 0,
            reason: format!("row {row} has no item"),
        })?);
    }
    let m = EmbeddingMatrix::new(dim, item_ids, data)?;
    if let Some(missing) = corpus.ids().find(|id| !m.index.contains_key(*id)) {
        return Err(EmbedError::MissingItem(missing.to_string()));
    }
    Ok(m)
}

pub fn load_embeddings(path: &Path, corpus: &ItemCorpus) -> Result<EmbeddingMatrix, EmbedError> {
    let open = |p: &Path| {
        File::open(p).map_err(|source| EmbedError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let ip = index_path(path);
    read_embeddings(BufReader::new(open(path)?), BufReader::new(open(&ip)?), corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticEmbedSpec {
    pub dim: usize,
    pub n_clusters: usize,
    pub cluster_spread: f64,
    pub seed: u64,
    pub l2_normalize: bool,
}

impl Default for SyntheticEmbedSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            n_clusters: 10,
            cluster_spread: 0.05,
            seed: 0,
            l2_normalize: false,
        }
    }
}

/// Cluster of an item under the planted generator.
pub fn planted_cluster(item_id: &str, n_clusters: usize, seed: u64) -> usize {
    (stable_hash(item_id, seed) % n_clusters as u64) as usize
}

/// Unit-norm centroids drawn from the seeded generator.
pub fn planted_centroids(dim: usize, n_clusters: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng_for(seed, "centroids", 0);
    (0..n_clusters)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect()
}

/// Rows follow corpus order; each is its cluster centroid plus Gaussian noise
/// drawn from a stream keyed by `(item_id, seed)`.
pub fn synth_embeddings(corpus: &ItemCorpus, spec: &SyntheticEmbedSpec) -> Result<EmbeddingMatrix, EmbedError> {
    if spec.dim == 0 || spec.n_clusters == 0 || spec.n_clusters > corpus.len().max(1) {
        return Err(EmbedError::InvalidSpec(format!(
            "dim {} / clusters {} for {} items",
            spec.dim,
            spec.n_clusters,
            corpus.len()
        )));
    }
    if !(spec.cluster_spread >= 0.0 && spec.cluster_spread.is_finite()) {
        return Err(EmbedError::InvalidSpec("cluster_spread must be >= 0".into()));
    }
    let centroids = planted_centroids(spec.dim, spec.n_clusters, spec.seed);
    let mut data = Vec::with_capacity(corpus.len() * spec.dim);
    for id in corpus.ids() {
        let c = &centroids[planted_cluster(id, spec.n_clusters, spec.seed)];
        let mut rng = rng_for(stable_hash(id, spec.seed), "item-noise", 0);
        for &x in c {
            let z: f64 = rng.sample(StandardNormal);
            data.push((x as f64 + spec.cluster_spread * z) as f32);
        }
    }
    let mut m = EmbeddingMatrix::new(spec.dim, corpus.ids().map(String::from).collect(), data)?;
    if spec.l2_normalize {
        m.l2_normalize();
    }
    Ok(m)
}
