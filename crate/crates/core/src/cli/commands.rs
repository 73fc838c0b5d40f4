use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{EvalModel, ExperimentConfig};
use super::report::{collect_rows, render_csv, render_report};
use super::{CliError, Command};
use crate::autodiff::{load_checkpoint, save_checkpoint};
use crate::corpus::{
    ingest, planted_corpus, split, write_interactions, write_items, Ingested, ItemCorpus, Role, SplitAssignment,
};
use crate::decode::{constrained_beam_search, DecodeConfig, DecodeRecord};
use crate::embed::{index_path, load_embeddings, synth_embeddings, EmbeddingMatrix};
use crate::eval::EvalReport;
use crate::models::{
    attach_adapter, build_sasrec, build_tiger, evaluate_sasrec, evaluate_tiger, sasrec_examples, sasrec_sequences,
    select_lr, tiger_examples, train_sasrec, train_tiger, AdapterConfig, AdapterSource, ItemIndex, ModelError, Sasrec,
    SasrecConfig, Seq2SeqConfig, SidCatalog, Tiger, TrainReport,
};
use crate::scaling::{fit, heldout_error, read_points, ScalingPoint};
use crate::tokenizer::{read_assignments, read_codebooks, tokenize, write_assignments, write_codebooks, SidTable};
use crate::util::write_jsonl;

pub(crate) const ITEMS: &str = "items.jsonl";
pub(crate) const INTERACTIONS: &str = "interactions.jsonl";
pub(crate) const SPLIT: &str = "split.jsonl";
pub(crate) const EMBEDDINGS: &str = "embeddings.bin";
pub(crate) const CODEBOOKS: &str = "sid_codebooks.bin";
pub(crate) const SIDS: &str = "sids.jsonl";
pub(crate) const TIGER_CKPT: &str = "tiger.ckpt";
pub(crate) const SASREC_CKPT: &str = "sasrec.ckpt";
pub(crate) const CF_EMBEDDINGS: &str = "cf_embeddings.bin";
pub(crate) const DECODE: &str = "decode.jsonl";
pub(crate) const FIT: &str = "fit.json";
pub(crate) const HELDOUT: &str = "heldout.json";
pub(crate) const MANIFEST: &str = "manifest.json";

type F = f32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    command: String,
    config_hash: String,
    seed: u64,
    sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    elapsed_s: Option<f64>,
}

/// Checkpoint header: everything needed to rebuild the model before loading weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TigerMeta {
    config_hash: String,
    seed: u64,
    lr: f64,
    model: Seq2SeqConfig,
    adapter: Option<AdapterConfig>,
    adapter_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SasrecMeta {
    config_hash: String,
    seed: u64,
    lr: f64,
    model: SasrecConfig,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    command: Command,
    out: PathBuf,
    hash: String,
    deterministic: bool,
    written: Vec<String>,
    start: Instant,
}

impl<'a> Ctx<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn need(&self, name: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        need(&self.out, name, producer)
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    /// Writes a JSON object carrying the config hash and seed.
    fn write_json(&mut self, name: &str, body: Value) -> Result<(), CliError> {
        let mut obj = match body {
            Value::Object(m) => m,
            other => {
                let mut m = serde_json::Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("config_hash".into(), Value::String(self.hash.clone()));
        obj.insert("seed".into(), json!(self.cfg.seed));
        let text = serde_json::to_string_pretty(&Value::Object(obj)).expect("json value serializes");
        self.write(name, |w| writeln!(w, "{text}"))
    }

    fn record(&mut self, name: &str) {
        if !self.written.iter().any(|n| n == name) {
            self.written.push(name.to_string());
        }
    }

    fn finish(self) -> Result<(), CliError> {
        let snapshot = self.path(&format!("config.{}.json", self.command.name()));
        let text = serde_json::to_string_pretty(self.cfg).expect("config serializes");
        std::fs::write(&snapshot, format!("{text}\n")).map_err(|e| CliError::io(&snapshot, e))?;
        let manifest_path = self.path(MANIFEST);
        let mut manifest: BTreeMap<String, ManifestEntry> = std::fs::read_to_string(&manifest_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        let elapsed = (!self.deterministic).then(|| self.start.elapsed().as_secs_f64());
        for name in &self.written {
            let path = self.path(name);
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    command: self.command.name().into(),
                    config_hash: self.hash.clone(),
                    seed: self.cfg.seed,
                    sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
                    elapsed_s: elapsed,
                },
            );
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, format!("{text}\n")).map_err(|e| CliError::io(&manifest_path, e))
    }
}

/// An upstream artifact that must already exist.
fn need(dir: &Path, name: &str, producer: &'static str) -> Result<PathBuf, CliError> {
    existing(dir.join(name), producer)
}

fn existing(path: PathBuf, producer: &'static str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path, producer })
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?))
}

pub(crate) fn run(command: Command, cfg: &ExperimentConfig, deterministic: bool) -> Result<(), CliError> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut ctx = Ctx {
        cfg,
        command,
        out,
        hash: cfg.hash(),
        deterministic,
        written: Vec::new(),
        start: Instant::now(),
    };
    match command {
        Command::Ingest => cmd_ingest(&mut ctx)?,
        Command::SynthEmbed => cmd_synth_embed(&mut ctx)?,
        Command::Tokenize => cmd_tokenize(&mut ctx)?,
        Command::TrainTiger => cmd_train_tiger(&mut ctx)?,
        Command::TrainSasrec => cmd_train_sasrec(&mut ctx)?,
        Command::Eval => cmd_eval(&mut ctx)?,
        Command::Decode => cmd_decode(&mut ctx)?,
        Command::FitScaling => cmd_fit(&mut ctx)?,
        Command::Heldout => cmd_heldout(&mut ctx)?,
        Command::Report => cmd_report(&mut ctx)?,
    }
    ctx.finish()
}

fn load_corpus(dir: &Path) -> Result<Ingested, CliError> {
    let items = need(dir, ITEMS, "ingest")?;
    let inter = need(dir, INTERACTIONS, "ingest")?;
    Ok(ingest(&items, &inter, usize::MAX)?)
}

fn load_split(dir: &Path) -> Result<SplitAssignment, CliError> {
    let path = need(dir, SPLIT, "ingest")?;
    Ok(SplitAssignment::read(open(&path)?)?)
}

fn load_catalog(dir: &Path) -> Result<SidCatalog, CliError> {
    let books = read_codebooks(open(&need(dir, CODEBOOKS, "tokenize")?)?)?;
    let entries = read_assignments(open(&need(dir, SIDS, "tokenize")?)?)?;
    Ok(SidCatalog::new(&SidTable::new(books.sizes(), entries))?)
}

fn cmd_ingest(ctx: &mut Ctx) -> Result<(), CliError> {
    let data = &ctx.cfg.data;
    let (corpus, logs, dropped) = match (&data.planted, &data.items, &data.interactions) {
        (Some(spec), _, _) => {
            let (c, l) = planted_corpus(spec)?;
            (c, l, 0)
        }
        (None, Some(items), Some(inter)) => {
            let ing = ingest(items, inter, data.max_seq_len)?;
            (ing.corpus, ing.logs, ing.dropped_users)
        }
        _ => {
            return Err(CliError::Config(
                "data needs either `planted` or both `items` and `interactions`".into(),
            ))
        }
    };
    let assignment = split(&logs, &ctx.cfg.split)?;
    ctx.write(ITEMS, |w| write_items(w, &corpus))?;
    ctx.write(INTERACTIONS, |w| write_interactions(w, &logs))?;
    ctx.write(SPLIT, |w| assignment.write(w))?;
    let count = |r: Role| assignment.role(r).count();
    ctx.write_json(
        "ingest.json",
        json!({
            "n_items": corpus.len(),
            "n_users": logs.len(),
            "dropped_users": dropped,
            "cold_items": assignment.cold_items,
            "pairs": {"train": count(Role::Train), "valid": count(Role::Valid), "test": count(Role::Test)},
        }),
    )
}

fn save_embeddings(ctx: &mut Ctx, name: &str, m: &EmbeddingMatrix) -> Result<(), CliError> {
    let path = ctx.path(name);
    m.save(&path)?;
    ctx.record(name);
    let idx = index_path(&path);
    let idx_name = idx.file_name().expect("index has a file name").to_string_lossy().into_owned();
    ctx.record(&idx_name);
    Ok(())
}

fn cmd_synth_embed(ctx: &mut Ctx) -> Result<(), CliError> {
    let corpus = load_corpus(&ctx.out)?.corpus;
    let m = synth_embeddings(&corpus, &ctx.cfg.embed.synthetic)?;
    save_embeddings(ctx, EMBEDDINGS, &m)
}

fn item_embeddings_path(ctx: &Ctx) -> Result<PathBuf, CliError> {
    match &ctx.cfg.embed.path {
        Some(p) => existing(p.clone(), "an embedding export"),
        None => ctx.need(EMBEDDINGS, "synth-embed"),
    }
}

fn cmd_tokenize(ctx: &mut Ctx) -> Result<(), CliError> {
    let corpus = load_corpus(&ctx.out)?.corpus;
    let emb = load_embeddings(&item_embeddings_path(ctx)?, &corpus)?;
    let tok = tokenize(&emb, &ctx.cfg.sid)?;
    ctx.write(CODEBOOKS, |w| write_codebooks(w, &tok.books))?;
    ctx.write(SIDS, |w| write_assignments(w, &tok.table.entries))?;
    let catalog = SidCatalog::new(&tok.table)?;
    ctx.write_json(
        "tokenize.json",
        json!({
            "level_sizes": tok.books.sizes(),
            "disambig_size": tok.table.disambig_size(),
            "item_len": catalog.item_len(),
            "vocab_size": catalog.vocab_size(),
            "n_items": catalog.len(),
        }),
    )
}

fn lr_grid(ctx: &Ctx) -> Vec<f64> {
    if ctx.cfg.lr_grid.is_empty() {
        vec![ctx.cfg.train.optimizer.lr]
    } else {
        ctx.cfg.lr_grid.clone()
    }
}

fn progress(model: &'static str, lr: f64) -> impl FnMut(&crate::models::EpochMetrics) {
    move |m| match m.valid_recall {
        Some(r) => eprintln!("{model} lr={lr} epoch {} loss {:.4} valid_recall@5 {r:.4}", m.epoch, m.loss),
        None => eprintln!("{model} lr={lr} epoch {} loss {:.4}", m.epoch, m.loss),
    }
}

fn write_training(ctx: &mut Ctx, prefix: &str, report: &TrainReport, scores: &[(f64, f64)], n_params: usize) -> Result<(), CliError> {
    ctx.write(&format!("{prefix}_metrics.jsonl"), |w| write_jsonl(w, &report.epochs))?;
    let search: Vec<Value> = scores.iter().map(|(lr, s)| json!({"lr": lr, "valid_recall@5": s})).collect();
    ctx.write_json(
        &format!("{prefix}_train.json"),
        json!({"lr": report.lr, "steps": report.steps, "n_params": n_params, "lr_search": search}),
    )
}

fn selection_score(report: &TrainReport) -> f64 {
    report.final_valid_recall().unwrap_or(f64::NEG_INFINITY)
}

fn cmd_train_tiger(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let corpus = load_corpus(&ctx.out)?.corpus;
    let catalog = load_catalog(&ctx.out)?;
    let assignment = load_split(&ctx.out)?;
    let train = tiger_examples(&assignment, Role::Train, &catalog)?;
    let valid = tiger_examples(&assignment, Role::Valid, &catalog)?;
    let mut mcfg = cfg.tiger.clone();
    if mcfg.vocab_size == 0 {
        mcfg.vocab_size = catalog.vocab_size();
    }
    let adapter = match &cfg.adapter {
        Some(spec) => {
            let path = match (&spec.embeddings, spec.source) {
                (Some(p), _) => existing(p.clone(), "an embedding export")?,
                (None, AdapterSource::Semantic) => item_embeddings_path(ctx)?,
                (None, AdapterSource::Cf) => ctx.need(CF_EMBEDDINGS, "train-sasrec")?,
            };
            let aux = load_embeddings(&path, &corpus)?;
            let acfg = AdapterConfig::new(spec.source, aux.dim(), spec.hidden_dim, mcfg.d_model);
            Some((acfg, aux, path))
        }
        None => None,
    };
    let build = || -> Result<Tiger<F>, ModelError> {
        let mut m = build_tiger::<F>(&mcfg)?;
        if let Some((acfg, aux, _)) = &adapter {
            attach_adapter(&mut m, &catalog, aux, acfg)?;
        }
        Ok(m)
    };
    let (lr, (model, report), scores) = select_lr(&lr_grid(ctx), |lr| {
        let mut tc = cfg.train.clone();
        tc.optimizer.lr = lr;
        let mut m = build()?;
        let r = train_tiger(&mut m, &catalog, &train, &valid, &tc, progress("tiger", lr))?;
        let s = selection_score(&r);
        Ok(((m, r), s))
    })?;
    let meta = TigerMeta {
        config_hash: ctx.hash.clone(),
        seed: cfg.seed,
        lr,
        model: mcfg.clone(),
        adapter: adapter.as_ref().map(|(a, _, _)| a.clone()),
        adapter_embeddings: adapter.as_ref().map(|(_, _, p)| p.clone()),
    };
    let path = ctx.path(TIGER_CKPT);
    save_checkpoint(&path, &model.store, &serde_json::to_string(&meta).expect("meta serializes"))?;
    ctx.record(TIGER_CKPT);
    write_training(ctx, "tiger", &report, &scores, model.param_count())
}

fn cmd_train_sasrec(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let corpus = load_corpus(&ctx.out)?.corpus;
    let index = item_index(&corpus);
    let assignment = load_split(&ctx.out)?;
    let train = sasrec_examples(&assignment, Role::Train, &index)?;
    let valid = sasrec_examples(&assignment, Role::Valid, &index)?;
    let sequences = sasrec_sequences(&train);
    let mut mcfg = cfg.sasrec.clone();
    mcfg.item_count = index.len();
    mcfg.validate()?;
    let (lr, (model, report), scores) = select_lr(&lr_grid(ctx), |lr| {
        let mut tc = cfg.train.clone();
        tc.optimizer.lr = lr;
        let mut m = build_sasrec::<F>(&mcfg)?;
        let r = train_sasrec(&mut m, &sequences, &valid, &tc, progress("sasrec", lr))?;
        let s = selection_score(&r);
        Ok(((m, r), s))
    })?;
    let meta = SasrecMeta {
        config_hash: ctx.hash.clone(),
        seed: cfg.seed,
        lr,
        model: mcfg.clone(),
    };
    let path = ctx.path(SASREC_CKPT);
    save_checkpoint(&path, &model.store, &serde_json::to_string(&meta).expect("meta serializes"))?;
    ctx.record(SASREC_CKPT);
    save_embeddings(ctx, CF_EMBEDDINGS, &model.item_embeddings(&index)?)?;
    write_training(ctx, "sasrec", &report, &scores, mcfg.param_count())
}

fn item_index(corpus: &ItemCorpus) -> ItemIndex {
    ItemIndex::new(corpus.ids().map(str::to_string).collect())
}

/// The trained encoder-decoder of a run directory and the SID catalogue it
/// was trained on.
pub fn open_tiger_run(dir: &Path) -> Result<(Tiger<F>, SidCatalog), CliError> {
    let corpus = load_corpus(dir)?.corpus;
    let catalog = load_catalog(dir)?;
    let model = load_tiger(dir, &corpus, &catalog)?;
    Ok((model, catalog))
}

fn bad_checkpoint(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn load_tiger(dir: &Path, corpus: &ItemCorpus, catalog: &SidCatalog) -> Result<Tiger<F>, CliError> {
    let path = need(dir, TIGER_CKPT, "train-tiger")?;
    let (store, header) = load_checkpoint::<F>(&path)?;
    let meta: TigerMeta = serde_json::from_str(&header).map_err(|e| bad_checkpoint(&path, e))?;
    let mut model = build_tiger::<F>(&meta.model)?;
    if let (Some(acfg), Some(aux_path)) = (&meta.adapter, &meta.adapter_embeddings) {
        let aux = load_embeddings(&existing(aux_path.clone(), "train-tiger")?, corpus)?;
        attach_adapter(&mut model, catalog, &aux, acfg)?;
    }
    model.load_params(&store)?;
    model.check_catalog(catalog)?;
    Ok(model)
}

fn load_sasrec(dir: &Path) -> Result<Sasrec<F>, CliError> {
    let path = need(dir, SASREC_CKPT, "train-sasrec")?;
    let (store, header) = load_checkpoint::<F>(&path)?;
    let meta: SasrecMeta = serde_json::from_str(&header).map_err(|e| bad_checkpoint(&path, e))?;
    let mut model = build_sasrec::<F>(&meta.model)?;
    model.load_params(&store)?;
    Ok(model)
}

fn eval_body(model: &str, role: Role, n_params: usize, report: &EvalReport) -> Value {
    json!({
        "model": model,
        "role": role,
        "n_params": n_params,
        "n_users": report.n_users,
        "recall": report.recall,
        "ndcg": report.ndcg,
        "mr": report.mr,
    })
}

fn cmd_eval(ctx: &mut Ctx) -> Result<(), CliError> {
    let ec = ctx.cfg.eval.clone();
    let corpus = load_corpus(&ctx.out)?.corpus;
    let assignment = load_split(&ctx.out)?;
    let (name, n_params, report) = match ec.model {
        EvalModel::Tiger => {
            let catalog = load_catalog(&ctx.out)?;
            let model = load_tiger(&ctx.out, &corpus, &catalog)?;
            let examples = tiger_examples(&assignment, ec.role, &catalog)?;
            ("tiger", model.param_count(), evaluate_tiger(&model, &catalog, &examples, &ec.ks)?)
        }
        EvalModel::Sasrec => {
            let model = load_sasrec(&ctx.out)?;
            let examples = sasrec_examples(&assignment, ec.role, &item_index(&corpus))?;
            ("sasrec", model.cfg.param_count(), evaluate_sasrec(&model, &examples, &ec.ks)?)
        }
    };
    ctx.write(&format!("eval_{name}_hits.jsonl"), |w| write_jsonl(w, &report.hits))?;
    ctx.write_json(&format!("eval_{name}.json"), eval_body(name, ec.role, n_params, &report))
}

fn cmd_decode(ctx: &mut Ctx) -> Result<(), CliError> {
    let corpus = load_corpus(&ctx.out)?.corpus;
    let catalog = load_catalog(&ctx.out)?;
    let assignment = load_split(&ctx.out)?;
    let model = load_tiger(&ctx.out, &corpus, &catalog)?;
    let examples = tiger_examples(&assignment, ctx.cfg.eval.role, &catalog)?;
    let dcfg = DecodeConfig {
        max_new_tokens: ctx.cfg.decode.max_new_tokens.max(catalog.item_len() + 1),
        ..ctx.cfg.decode
    };
    let records = examples
        .par_iter()
        .map(|e| -> Result<DecodeRecord, CliError> {
            let enc = model.encode_context(&catalog, &e.history)?;
            let beams = constrained_beam_search(&enc, &[], catalog.trie(), &dcfg)?;
            let mut rec = DecodeRecord {
                user_id: e.user_id.clone(),
                ranked_items: Vec::with_capacity(beams.len()),
                scores: Vec::with_capacity(beams.len()),
            };
            for b in beams {
                if let Some(id) = catalog.trie().payload(&b.sequence) {
                    rec.ranked_items.push(id.clone());
                    rec.scores.push(b.score);
                }
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ctx.write(DECODE, |w| write_jsonl(w, &records))
}

fn load_points(ctx: &Ctx) -> Result<Vec<ScalingPoint>, CliError> {
    let path = ctx
        .cfg
        .scaling
        .points
        .clone()
        .ok_or_else(|| CliError::Config("scaling.points is required".into()))?;
    let path = existing(path, "a scaling sweep")?;
    read_points(open(&path)?).map_err(|e| CliError::io(&path, e))
}

fn cmd_fit(ctx: &mut Ctx) -> Result<(), CliError> {
    let points = load_points(ctx)?;
    let sc = &ctx.cfg.scaling;
    let result = fit(sc.form, &points, &sc.fit)?;
    ctx.write_json(FIT, json!({ "n_points": points.len(), "result": result }))
}

fn cmd_heldout(ctx: &mut Ctx) -> Result<(), CliError> {
    let points = load_points(ctx)?;
    let sc = &ctx.cfg.scaling;
    let mut errors = Vec::with_capacity(sc.forms.len());
    for &form in &sc.forms {
        let err = heldout_error(form, &points, sc.holdout_fraction, ctx.cfg.seed, sc.metric, &sc.fit)?;
        errors.push(json!({"form": form, "error": err}));
    }
    ctx.write_json(
        HELDOUT,
        json!({
            "n_points": points.len(),
            "holdout_fraction": sc.holdout_fraction,
            "metric": sc.metric,
            "errors": errors,
        }),
    )
}

fn cmd_report(ctx: &mut Ctx) -> Result<(), CliError> {
    let runs = if ctx.cfg.report.runs.is_empty() {
        let mut dirs = vec![ctx.out.clone()];
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&ctx.out)
            .map_err(|e| CliError::io(&ctx.out, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        dirs.extend(subdirs);
        dirs
    } else {
        ctx.cfg.report.runs.clone()
    };
    let rows = collect_rows(&runs, &ctx.out)?;
    let md = render_report(&rows);
    let header = format!("<!-- config_hash: {} seed: {} -->\n", ctx.hash, ctx.cfg.seed);
    print!("{md}");
    ctx.write("report.md", |w| write!(w, "{header}{md}"))?;
    let csv = render_csv(&rows);
    ctx.write("scaling.csv", |w| w.write_all(csv.as_bytes()))
}
