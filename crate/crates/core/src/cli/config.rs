//! Experiment configuration: one JSON document with a section per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::CliError;
use crate::corpus::{PlantedSpec, Role, SplitSpec};
use crate::decode::DecodeConfig;
use crate::embed::SyntheticEmbedSpec;
use crate::models::{AdapterSource, SasrecConfig, Seq2SeqConfig, TrainConfig};
use crate::scaling::{EqForm, ErrorMetric, FitOptions};
use crate::tokenizer::SidConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Propagated into every component seed.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub embed: EmbedConfig,
    pub sid: SidConfig,
    /// `vocab_size: 0` takes the size implied by the SID table.
    pub tiger: Seq2SeqConfig,
    pub sasrec: SasrecConfig,
    pub adapter: Option<AdapterSpec>,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    /// Learning rates tried by `train-tiger` and `train-sasrec`; the best
    /// valid Recall@5 wins.
    pub lr_grid: Vec<f64>,
    pub eval: EvalConfig,
    pub scaling: ScalingConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            embed: EmbedConfig::default(),
            sid: SidConfig::default(),
            tiger: Seq2SeqConfig {
                vocab_size: 0,
                ..Seq2SeqConfig::default()
            },
            sasrec: SasrecConfig::default(),
            adapter: None,
            decode: DecodeConfig::default(),
            train: TrainConfig::default(),
            lr_grid: vec![1e-2, 1e-3, 1e-4],
            eval: EvalConfig::default(),
            scaling: ScalingConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub max_seq_len: usize,
    /// Generates a planted-signal corpus instead of reading files.
    pub planted: Option<PlantedSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            items: None,
            interactions: None,
            max_seq_len: 50,
            planted: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Precomputed item embeddings; `tokenize` reads these instead of the
    /// output of `synth-embed`.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticEmbedSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub source: AdapterSource,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Defaults to the item embeddings for `semantic` and the SASRec table for `cf`.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

fn default_hidden() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    #[default]
    Tiger,
    Sasrec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub model: EvalModel,
    pub role: Role,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            model: EvalModel::Tiger,
            role: Role::Test,
            ks: vec![5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub points: Option<PathBuf>,
    pub form: EqForm,
    pub fit: FitOptions,
    /// Forms compared by `heldout`.
    pub forms: Vec<EqForm>,
    pub holdout_fraction: f64,
    pub metric: ErrorMetric,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            points: None,
            form: EqForm::Eq4,
            fit: FitOptions::default(),
            forms: vec![EqForm::Eq4, EqForm::Eq6],
            holdout_fraction: 0.2,
            metric: ErrorMetric::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Run directories to tabulate; empty scans the output directory.
    pub runs: Vec<PathBuf>,
}

/// Sets `path` (dotted, e.g. `tiger.d_model`) in a JSON document. The value
/// is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not PATH=VALUE")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override path `{path}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}`: `{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies overrides and the
    /// seed flag, then propagates the seed.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        // An omitted tiger vocabulary follows the SID table rather than the
        // model default.
        if let Some(t) = doc.get_mut("tiger").and_then(Value::as_object_mut) {
            t.entry("vocab_size").or_insert(Value::from(0));
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        let s = self.seed;
        if let Some(p) = &mut self.data.planted {
            p.seed = s;
        }
        self.split.seed = s;
        self.embed.synthetic.seed = s;
        self.sid.seed = s;
        self.tiger.seed = s;
        self.sasrec.seed = s;
        self.train.seed = s;
        self.scaling.fit.seed = s;
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form,
    /// ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_values_and_types() {
        let mut doc = serde_json::json!({"tiger": {"layers": 2}});
        apply_override(&mut doc, "tiger.layers=4").unwrap();
        apply_override(&mut doc, "eval.role=valid").unwrap();
        apply_override(&mut doc, "data.planted.n_items=50").unwrap();
        assert_eq!(doc["tiger"]["layers"], 4);
        assert_eq!(doc["eval"]["role"], "valid");
        assert_eq!(doc["data"]["planted"]["n_items"], 50);
        assert!(apply_override(&mut doc, "tiger.layers.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
    }

    #[test]
    fn unknown_top_level_field_is_a_config_error() {
        let err = ExperimentConfig::resolve(None, &["tigr.layers=3".into()], None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seed_flag_propagates_and_changes_hash() {
        let a = ExperimentConfig::resolve(None, &[], Some(3)).unwrap();
        assert_eq!((a.tiger.seed, a.train.seed, a.sid.seed), (3, 3, 3));
        let b = ExperimentConfig::resolve(None, &[], Some(4)).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = a.clone();
        c.out = Some("elsewhere".into());
        assert_eq!(a.hash(), c.hash());
    }
}
