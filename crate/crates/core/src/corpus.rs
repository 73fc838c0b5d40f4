//! Item catalogue, user interaction logs and train/valid/test splitting.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{read_jsonl, rng_for, write_jsonl};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{file}:{line}: malformed record: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("interaction log of user {user_id} references unknown item {item_id}")]
    DanglingItem { user_id: String, item_id: String },
    #[error("cannot sample {requested} cold items from {eligible} eligible items")]
    TooManyColdItems { requested: usize, eligible: usize },
    #[error("log of user {user_id} has {len} interactions, need at least 3")]
    ShortLog { user_id: String, len: usize },
    #[error("invalid planted-corpus spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub text: String,
}

/// Items in file order with an id index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemCorpus {
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl ItemCorpus {
    /// Builds a corpus, rejecting duplicate ids and empty titles.
    pub fn new(items: Vec<Item>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            let reason = if it.title.is_empty() {
                Some(format!("item {} has an empty title", it.item_id))
            } else if index.insert(it.item_id.clone(), i).is_some() {
                Some(format!("duplicate item_id {}", it.item_id))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(CorpusError::Malformed {
                    file: "items".into(),
                    line: i + 1,
                    reason,
                });
            }
        }
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.index.contains_key(item_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub user_id: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: ItemCorpus,
    pub logs: Vec<InteractionLog>,
    /// Users removed for having fewer than 3 interactions after truncation.
    pub dropped_users: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ingest(items_path: &Path, interactions_path: &Path, max_seq_len: usize) -> Result<Ingested, CorpusError> {
    let items = BufReader::new(File::open(items_path).map_err(io_err(items_path))?);
    let inter = BufReader::new(File::open(interactions_path).map_err(io_err(interactions_path))?);
    ingest_from(items, inter, max_seq_len)
}

pub fn ingest_from<R1: BufRead, R2: BufRead>(
    items: R1,
    interactions: R2,
    max_seq_len: usize,
) -> Result<Ingested, CorpusError> {
    let items: Vec<Item> = read_jsonl(items).map_err(|(line, reason)| CorpusError::Malformed {
        file: "items".into(),
        line,
        reason,
    })?;
    let corpus = ItemCorpus::new(items)?;
    let raw: Vec<InteractionLog> =
        read_jsonl(interactions).map_err(|(line, reason)| CorpusError::Malformed {
            file: "interactions".into(),
            line,
            reason,
        })?;
    let mut logs = Vec::with_capacity(raw.len());
    let mut dropped_users = 0;
    for mut log in raw {
        if let Some(missing) = log.items.iter().find(|i| !corpus.contains(i)) {
            return Err(CorpusError::DanglingItem {
                user_id: log.user_id,
                item_id: missing.clone(),
            });
        }
        if log.items.len() > max_seq_len {
            log.items.drain(..log.items.len() - max_seq_len);
        }
        if log.items.len() < 3 {
            dropped_users += 1;
        } else {
            logs.push(log);
        }
    }
    Ok(Ingested {
        corpus,
        logs,
        dropped_users,
    })
}

pub fn write_items<W: Write>(w: W, corpus: &ItemCorpus) -> std::io::Result<()> {
    write_jsonl(w, corpus.items())
}

pub fn write_interactions<W: Write>(w: W, logs: &[InteractionLog]) -> std::io::Result<()> {
    write_jsonl(w, logs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    #[default]
    LeaveOneOut,
    ColdStart,
}

/// Which history prefixes become training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPairs {
    #[default]
    AllPrefixes,
    LongestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub scheme: SplitScheme,
    pub cold_item_count: usize,
    pub seed: u64,
    pub train_pairs: TrainPairs,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            scheme: SplitScheme::LeaveOneOut,
            cold_item_count: 0,
            seed: 0,
            train_pairs: TrainPairs::AllPrefixes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub user_id: String,
    pub role: Role,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitAssignment {
    pub records: Vec<SplitRecord>,
    /// Sorted cold-start items; empty for leave-one-out.
    pub cold_items: Vec<String>,
}

impl SplitAssignment {
    pub fn role(&self, role: Role) -> impl Iterator<Item = &SplitRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    pub fn write<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_jsonl(w, &self.records)
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let records = read_jsonl(r).map_err(|(line, reason)| CorpusError::Malformed {
            file: "split".into(),
            line,
            reason,
        })?;
        Ok(Self {
            records,
            cold_items: Vec::new(),
        })
    }
}

fn push_train(out: &mut Vec<SplitRecord>, user: &str, seq: &[String], mode: TrainPairs) {
    let range = match mode {
        TrainPairs::AllPrefixes => 1..seq.len(),
        TrainPairs::LongestOnly => seq.len().saturating_sub(1).max(1)..seq.len(),
    };
    for t in range {
        out.push(SplitRecord {
            user_id: user.to_string(),
            role: Role::Train,
            history: seq[..t].to_vec(),
            target: seq[t].clone(),
        });
    }
}

pub fn split(logs: &[InteractionLog], spec: &SplitSpec) -> Result<SplitAssignment, CorpusError> {
    if let Some(short) = logs.iter().find(|l| l.items.len() < 3) {
        return Err(CorpusError::ShortLog {
            user_id: short.user_id.clone(),
            len: short.items.len(),
        });
    }
    let cold: HashSet<String> = match spec.scheme {
        SplitScheme::LeaveOneOut => HashSet::new(),
        SplitScheme::ColdStart => {
            let eligible: Vec<String> = logs
                .iter()
                .flat_map(|l| l.items.iter().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if spec.cold_item_count > eligible.len() {
                return Err(CorpusError::TooManyColdItems {
                    requested: spec.cold_item_count,
                    eligible: eligible.len(),
                });
            }
            let mut rng = rng_for(spec.seed, "cold-start", 0);
            let mut eligible = eligible;
            let (chosen, _) = eligible.partial_shuffle(&mut rng, spec.cold_item_count);
            chosen.iter().cloned().collect()
        }
    };

    let mut records = Vec::new();
    for log in logs {
        let s = &log.items;
        let n = s.len();
        let user = log.user_id.as_str();
        let prefix = &s[..n - 2];
        if cold.is_empty() {
            push_train(&mut records, user, prefix, spec.train_pairs);
        } else {
            let warm: Vec<String> = prefix.iter().filter(|i| !cold.contains(*i)).cloned().collect();
            push_train(&mut records, user, &warm, spec.train_pairs);
            for t in 1..n - 2 {
                if cold.contains(&s[t]) {
                    records.push(SplitRecord {
                        user_id: user.to_string(),
                        role: Role::Test,
                        history: s[..t].to_vec(),
                        target: s[t].clone(),
                    });
                }
            }
        }
        let valid_role = if cold.contains(&s[n - 2]) {
            Role::Test
        } else {
            Role::Valid
        };
        records.push(SplitRecord {
            user_id: user.to_string(),
            role: valid_role,
            history: s[..n - 2].to_vec(),
            target: s[n - 2].clone(),
        });
        records.push(SplitRecord {
            user_id: user.to_string(),
            role: Role::Test,
            history: s[..n - 1].to_vec(),
            target: s[n - 1].clone(),
        });
    }
    let mut cold_items: Vec<String> = cold.into_iter().collect();
    cold_items.sort();
    Ok(SplitAssignment {
        records,
        cold_items,
    })
}

/// Synthetic corpus whose users mostly stay inside one item cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub n_items: usize,
    pub n_clusters: usize,
    pub n_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next item comes from the current item's cluster.
    pub stay_prob: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_items: 500,
            n_clusters: 10,
            n_users: 2000,
            min_len: 5,
            max_len: 12,
            stay_prob: 0.9,
            seed: 0,
        }
    }
}

pub fn planted_item_id(i: usize) -> String {
    format!("item_{i:04}")
}

/// Generates items and logs. Cluster membership is
/// [`crate::embed::planted_cluster`], so embeddings synthesized with the same
/// seed and cluster count carry the planted structure.
pub fn planted_corpus(spec: &PlantedSpec) -> Result<(ItemCorpus, Vec<InteractionLog>), CorpusError> {
    if spec.n_items < 2 || spec.n_clusters == 0 || spec.n_clusters > spec.n_items {
        return Err(CorpusError::InvalidSpec(format!(
            "need 2 <= items and 1 <= clusters <= items, got {} items / {} clusters",
            spec.n_items, spec.n_clusters
        )));
    }
    if spec.min_len < 3 || spec.max_len < spec.min_len || !(0.0..=1.0).contains(&spec.stay_prob) {
        return Err(CorpusError::InvalidSpec(
            "need 3 <= min_len <= max_len and stay_prob in [0, 1]".into(),
        ));
    }
    let items: Vec<Item> = (0..spec.n_items)
        .map(|i| Item {
            item_id: planted_item_id(i),
            title: format!("Item {i}"),
            text: String::new(),
        })
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.n_clusters];
    let cluster: Vec<usize> = items
        .iter()
        .map(|it| crate::embed::planted_cluster(&it.item_id, spec.n_clusters, spec.seed))
        .collect();
    for (i, &c) in cluster.iter().enumerate() {
        members[c].push(i);
    }
    let mut logs = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut rng = rng_for(spec.seed, "planted-user", u as u64);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = rng.random_range(0..spec.n_items);
        let mut seq = vec![cur];
        while seq.len() < len {
            let pool = &members[cluster[cur]];
            let next = if pool.len() > 1 && rng.random::<f64>() < spec.stay_prob {
                loop {
                    let j = pool[rng.random_range(0..pool.len())];
                    if j != cur {
                        break j;
                    }
                }
            } else {
                loop {
                    let j = rng.random_range(0..spec.n_items);
                    if j != cur {
                        break j;
                    }
                }
            };
            seq.push(next);
            cur = next;
        }
        logs.push(InteractionLog {
            user_id: format!("user_{u:05}"),
            items: seq.into_iter().map(planted_item_id).collect(),
        });
    }
    Ok((ItemCorpus::new(items)?, logs))
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn truncation_keeps_suffix() {
        let items = "{\"item_id\":\"a\",\"title\":\"A\",\"text\":\"\"}\n\
                     {\"item_id\":\"b\",\"title\":\"B\",\"text\":\"\"}\n\
                     {\"item_id\":\"c\",\"title\":\"C\",\"text\":\"\"}\n\
                     {\"item_id\":\"d\",\"title\":\"D\",\"text\":\"\"}\n";
        let inter = "{\"user_id\":\"u\",\"items\":[\"a\",\"b\",\"c\",\"d\"]}\n";
        let got = ingest_from(items.as_bytes(), inter.as_bytes(), 3).unwrap();
        assert_eq!(got.logs[0].items, ids(&["b", "c", "d"]));
    }

    #[test]
    fn short_users_dropped_and_counted() {
        let items = "{\"item_id\":\"a\",\"title\":\"A\",\"text\":\"\"}\n{\"item_id\":\"b\",\"title\":\"B\",\"text\":\"\"}\n";
        let inter = "{\"user_id\":\"u\",\"items\":[\"a\",\"b\"]}\n";
        let got = ingest_from(items.as_bytes(), inter.as_bytes(), 20).unwrap();
        assert!(got.logs.is_empty());
        assert_eq!(got.dropped_users, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let items = "{\"item_id\":\"a\",\"title\":\"A\",\"text\":\"\"}\nnot json\n";
        let err = ingest_from(items.as_bytes(), "".as_bytes(), 20).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn dangling_item_named() {
        let items = "{\"item_id\":\"a\",\"title\":\"A\",\"text\":\"\"}\n";
        let inter = "{\"user_id\":\"u\",\"items\":[\"a\",\"zz\",\"a\"]}\n";
        let err = ingest_from(items.as_bytes(), inter.as_bytes(), 20).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn leave_one_out_three_items() {
        let logs = vec![InteractionLog {
            user_id: "u".into(),
            items: ids(&["a", "b", "c"]),
        }];
        let s = split(&logs, &SplitSpec::default()).unwrap();
        assert_eq!(s.role(Role::Train).count(), 0);
        let v: Vec<_> = s.role(Role::Valid).collect();
        assert_eq!((v[0].history.clone(), v[0].target.as_str()), (ids(&["a"]), "b"));
        let t: Vec<_> = s.role(Role::Test).collect();
        assert_eq!((t[0].history.clone(), t[0].target.as_str()), (ids(&["a", "b"]), "c"));
    }

    #[test]
    fn train_pair_modes() {
        let logs = vec![InteractionLog {
            user_id: "u".into(),
            items: ids(&["a", "b", "c", "d", "e"]),
        }];
        let all = split(&logs, &SplitSpec::default()).unwrap();
        let tr: Vec<_> = all.role(Role::Train).map(|r| r.target.as_str()).collect();
        assert_eq!(tr, ["b", "c"]);
        let longest = split(
            &logs,
            &SplitSpec {
                train_pairs: TrainPairs::LongestOnly,
                ..Default::default()
            },
        )
        .unwrap();
        let tr: Vec<_> = longest.role(Role::Train).collect();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].history, ids(&["a", "b"]));
    }

    #[test]
    fn cold_start_count_checked() {
        let logs = vec![InteractionLog {
            user_id: "u".into(),
            items: ids(&["a", "b", "c"]),
        }];
        let spec = SplitSpec {
            scheme: SplitScheme::ColdStart,
            cold_item_count: 4,
            ..Default::default()
        };
        assert!(matches!(
            split(&logs, &spec),
            Err(CorpusError::TooManyColdItems { eligible: 3, .. })
        ));
    }

    #[test]
    fn split_jsonl_round_trip() {
        let (_, logs) = planted_corpus(&PlantedSpec {
            n_items: 30,
            n_clusters: 3,
            n_users: 10,
            ..Default::default()
        })
        .unwrap();
        let s = split(&logs, &SplitSpec::default()).unwrap();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        let line = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        assert!(line.starts_with("{\"user_id\":"), "{line}");
        let back = SplitAssignment::read(buf.as_slice()).unwrap();
        assert_eq!(back.records, s.records);
    }
}
