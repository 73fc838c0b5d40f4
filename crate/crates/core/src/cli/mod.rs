//! The `sidgr` command line: one subcommand per pipeline stage, all reading a
//! shared JSON config and writing into one output directory.

mod commands;
pub mod config;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand};

pub use commands::open_tiger_run;
pub use config::{apply_override, ExperimentConfig};
pub use report::{render_report, ReportRow};

use crate::autodiff::AutodiffError;
use crate::corpus::CorpusError;
use crate::decode::DecodeError;
use crate::embed::EmbedError;
use crate::models::ModelError;
use crate::scaling::ScalingError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}: run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidSpec(_) | CorpusError::TooManyColdItems { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::InvalidSpec(_) => CliError::Config(e.to_string()),
            EmbedError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFiniteGradient { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TokenizerError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TokenizerError::Autodiff(a) => a.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::InvalidConfig => CliError::Config(e.to_string()),
            DecodeError::NonFiniteLogits { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::VocabMismatch { .. } | ModelError::AdapterDimension { .. } => {
                CliError::Config(e.to_string())
            }
            ModelError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            ModelError::Autodiff(a) => a.into(),
            ModelError::Decode(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ScalingError> for CliError {
    fn from(e: ScalingError) -> Self {
        match e {
            ScalingError::NoValidStart => CliError::Numerical(e.to_string()),
            ScalingError::Autodiff(a) => a.into(),
            ScalingError::Format { .. }
            | ScalingError::InvalidObservation { .. }
            | ScalingError::NonPositiveSize { .. }
            | ScalingError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sidgr", version, about = "Semantic-ID generative recommendation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; defaults apply to absent fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and every component seed derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to 1 in deterministic mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// When off, the manifest also records wall-clock timings.
    #[arg(long, global = true, action = ArgAction::Set, default_value_t = true, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: bool,
    /// Dotted config override, e.g. `--set tiger.layers=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Read or generate the corpus and split it.
    Ingest,
    /// Write clustered synthetic item embeddings.
    SynthEmbed,
    /// Learn codebooks and assign SIDs.
    Tokenize,
    /// Train the SID encoder-decoder.
    TrainTiger,
    /// Train the item-id baseline and export its item table.
    TrainSasrec,
    /// Score a trained model on one split role.
    Eval,
    /// Write ranked candidates for every user of the eval role.
    Decode,
    /// Fit a scaling law to measured points.
    FitScaling,
    /// Compare scaling-law forms on held-out points.
    Heldout,
    /// Tabulate evaluated runs.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::SynthEmbed => "synth-embed",
            Command::Tokenize => "tokenize",
            Command::TrainTiger => "train-tiger",
            Command::TrainSasrec => "train-sasrec",
            Command::Eval => "eval",
            Command::Decode => "decode",
            Command::FitScaling => "fit-scaling",
            Command::Heldout => "heldout",
            Command::Report => "report",
        }
    }
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sidgr {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    let threads = cli.threads.or(cli.deterministic.then_some(1));
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?
    };
    pool.install(|| commands::run(cli.command, &cfg, cli.deterministic))
}
