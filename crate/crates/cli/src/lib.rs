//! The `fqninfer` command line: subcommands over the pipeline stages with a
//! shared JSON configuration.
//!
//! Values resolve flags first, then `FQNINFER_*` environment variables,
//! then the config file, then built-in defaults. Exit status is 0 on
//! success, 1 when `--strict` is set and some items failed, 2 on fatal
//! errors.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fqninfer::infer::PromptSetting;
use thiserror::Error;

use crate::commands::{Outcome, ReportFormat};
use crate::config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ITEM_FAILURES: i32 = 1;
pub const EXIT_FATAL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] fqninfer::corpus::CorpusError),
    #[error(transparent)]
    Prompt(#[from] fqninfer::promptgen::PromptError),
    #[error(transparent)]
    Vocab(#[from] fqninfer::tokenizer::VocabError),
    #[error(transparent)]
    Backend(#[from] fqninfer::backend::BackendError),
    #[error(transparent)]
    Ngram(#[from] fqninfer::backend::NgramError),
    #[error(transparent)]
    Eval(#[from] fqninfer::eval::EvalError),
    #[error("json: {0}")]
    Json(serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fqninfer", version, about = "Infer fully-qualified type names in partial Java code")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, env = "FQNINFER_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "FQNINFER_SEED")]
    pub seed: Option<u64>,
    /// `ngram:<model>`, `remote:<url>` or `scripted:<fixture.json>`.
    #[arg(long, global = true, env = "FQNINFER_BACKEND")]
    pub backend: Option<String>,
    /// Vocabulary file, one token per line.
    #[arg(long, global = true, env = "FQNINFER_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "FQNINFER_JOBS")]
    pub jobs: Option<usize>,
    /// Exit with status 1 when any item fails.
    #[arg(long, global = true, env = "FQNINFER_STRICT")]
    pub strict: bool,
    /// Output file, or directory for `gen-prompts`. Defaults to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    LeaveOneOut,
    AllUnknown,
}

impl From<SettingArg> for PromptSetting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::LeaveOneOut => PromptSetting::LeaveOneOut,
            SettingArg::AllUnknown => PromptSetting::AllUnknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate Java files through their import tables into a corpus.
    Annotate {
        /// Files or directories of `.java` files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "unknown")]
        library: String,
    },
    /// Build masked prompts, the training file and the split manifest.
    GenPrompts {
        corpus: PathBuf,
        /// Gzip the training file.
        #[arg(long)]
        gzip: bool,
    },
    /// Train the n-gram scorer on a training file.
    TrainScorer { training: PathBuf },
    /// List inference points in a snippet (`-` or absent reads stdin).
    Detect { input: Option<PathBuf> },
    /// Predict FQNs for every point in a snippet.
    Infer {
        input: Option<PathBuf>,
        #[arg(long, value_enum, env = "FQNINFER_SETTING")]
        setting: Option<SettingArg>,
    },
    /// Predict every annotated point in a corpus and write evaluation records.
    PredictCorpus {
        corpus: PathBuf,
        #[arg(long, value_enum, env = "FQNINFER_SETTING")]
        setting: Option<SettingArg>,
    },
    /// Accuracy, BLEU-2 and split report over evaluation records.
    Eval {
        records: PathBuf,
        /// Split manifest written by `gen-prompts`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = "FQNINFER_THRESHOLD")]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
}

/// Effective configuration for a parsed command line.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut o = Overrides {
        seed: cli.global.seed,
        backend: cli.global.backend.clone(),
        vocab: cli.global.vocab.clone(),
        ..Default::default()
    };
    match &cli.command {
        Command::Infer { setting, .. } | Command::PredictCorpus { setting, .. } => {
            o.setting = setting.map(Into::into);
        }
        Command::Eval { threshold, .. } => o.threshold = *threshold,
        _ => {}
    }
    cfg.apply(&o);
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    out.clone()
        .ok_or_else(|| CliError::Config(format!("--out is required for {what}")))
}

pub fn execute(cli: &Cli, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let out = cli.global.out.as_deref();
    match &cli.command {
        Command::Annotate { inputs, library } => commands::cmd_annotate(inputs, library, cfg, out),
        Command::GenPrompts { corpus, gzip } => {
            commands::cmd_gen_prompts(corpus, cfg, &required_out(&cli.global.out, "gen-prompts")?, *gzip)
        }
        Command::TrainScorer { training } => {
            commands::cmd_train_scorer(training, cfg, &required_out(&cli.global.out, "train-scorer")?)
        }
        Command::Detect { input } => commands::cmd_detect(input.as_deref(), cfg, out),
        Command::Infer { input, .. } => commands::cmd_infer(input.as_deref(), cfg, out),
        Command::PredictCorpus { corpus, .. } => commands::cmd_predict_corpus(corpus, cfg, out),
        Command::Eval {
            records,
            manifest,
            format,
            ..
        } => {
            let f = match format {
                FormatArg::Text => ReportFormat::Text,
                FormatArg::Json => ReportFormat::Json,
            };
            commands::cmd_eval(records, manifest, cfg, f, out)
        }
    }
}

/// Run a parsed command line and map the result to an exit status.
pub fn run(cli: Cli) -> i32 {
    if let Some(j) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            tracing::warn!(error = %e, "thread pool already initialized");
        }
    }
    let result = resolve_config(&cli).and_then(|cfg| execute(&cli, &cfg));
    match result {
        Ok(o) if cli.global.strict && o.failures > 0 => {
            eprintln!("{} item(s) failed", o.failures);
            EXIT_ITEM_FAILURES
        }
        Ok(o) => {
            if o.failures > 0 {
                tracing::warn!(failures = o.failures, "some items failed");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FATAL
        }
    }
}
