//! One function per subcommand. Each returns the run manifest and the
//! number of per-item failures; fatal problems are errors.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use fqninfer::backend::remote::RemoteBackend;
use fqninfer::backend::{train_ngram_labeled, FillMaskScorer, NgramModel, NgramScorer, ScriptedBackend};
use fqninfer::corpus::{annotate_by_imports, parse_annotated, read_corpus, write_corpus, AnnotatedUnit, AnnotatorConfig, SourceUnit};
use fqninfer::detect::{find_points_with, DetectConfig, InferencePoint};
use fqninfer::eval::{evaluate_corpus, split_report, EvalRecord, SplitManifest};
use fqninfer::infer::{predict_all, Prediction};
use fqninfer::promptgen::{export_training, gen_corpus_prompts, open_input, read_jsonl, read_training, write_jsonl, PromptRecord};
use fqninfer::tokenizer::{TokenId, Vocab};
use serde::{Deserialize, Serialize};

use crate::config::{BackendSpec, RunConfig};
use crate::manifest::{sibling_path, FileDigest, RunManifest};
use crate::CliError;

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const TRAINING_FILE: &str = "training.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub failures: usize,
}

impl Outcome {
    fn new(mut manifest: RunManifest, failures: usize) -> Self {
        manifest.failures = failures;
        Self { manifest, failures }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

pub fn load_vocab(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Arc<Vocab>, CliError> {
    let path = cfg
        .vocab
        .as_ref()
        .ok_or_else(|| CliError::Config("no vocabulary configured; pass --vocab or set \"vocab\"".into()))?;
    manifest.input(path)?;
    Ok(Arc::new(Vocab::load(path, &cfg.vocab_config)?))
}

pub fn open_backend(
    cfg: &RunConfig,
    vocab: &Arc<Vocab>,
    manifest: &mut RunManifest,
) -> Result<Box<dyn FillMaskScorer>, CliError> {
    let spec = cfg
        .backend
        .as_deref()
        .ok_or_else(|| CliError::Config("no backend configured; pass --backend or set \"backend\"".into()))?;
    Ok(match BackendSpec::from_str(spec)? {
        BackendSpec::Ngram(path) => {
            manifest.input(&path)?;
            Box::new(NgramScorer::new(NgramModel::load(&path)?, vocab.clone())?)
        }
        BackendSpec::Scripted(path) => {
            manifest.input(&path)?;
            Box::new(ScriptedBackend::load(&path, vocab.clone())?)
        }
        BackendSpec::Remote(url) => Box::new(RemoteBackend::new(&url, vocab.clone(), cfg.remote.clone())?),
    })
}

fn read_text(input: Option<&Path>, manifest: &mut RunManifest) -> Result<(String, String), CliError> {
    match input {
        Some(p) if p != Path::new("-") => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            manifest.input(p)?;
            let id = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((id, text))
        }
        _ => {
            let mut text = String::new();
            std::io::stdin()
                .read_to_string(&mut text)
                .map_err(|e| CliError::io(Path::new("<stdin>"), e))?;
            manifest.inputs.push(FileDigest::of_bytes("-", text.as_bytes()));
            Ok(("stdin".into(), text))
        }
    }
}

/// Write to `out` and its sibling manifest, or to stdout with the manifest
/// logged.
fn emit(out: Option<&Path>, bytes: &[u8], manifest: &mut RunManifest) -> Result<(), CliError> {
    match out {
        Some(p) => {
            std::fs::write(p, bytes).map_err(|e| CliError::io(p, e))?;
            manifest.output(p)?;
            manifest.write(&sibling_path(p))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            manifest.outputs.push(FileDigest::of_bytes("-", bytes));
            let json = serde_json::to_string(manifest).map_err(CliError::Json)?;
            tracing::info!(manifest = %json, "run manifest");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::Json)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Parsed corpus units; malformed records are skipped and counted.
fn load_units(corpus: &Path, manifest: &mut RunManifest) -> Result<(Vec<AnnotatedUnit>, usize), CliError> {
    manifest.input(corpus)?;
    let records = read_corpus(corpus)?;
    let mut units = Vec::with_capacity(records.len());
    let mut failures = 0;
    for r in &records {
        match parse_annotated(r) {
            Ok(u) => units.push(u),
            Err(e) => {
                tracing::warn!(error = %e, "skipping corpus record");
                failures += 1;
            }
        }
    }
    if units.is_empty() {
        return Err(CliError::Config(format!("{} holds no usable records", corpus.display())));
    }
    Ok((units, failures))
}

fn java_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::io(path, e))?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.extension().is_some_and(|x| x == "java") {
                java_files(&e, out)?;
            }
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn cmd_annotate(inputs: &[PathBuf], library: &str, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("annotate", cfg);
    let mut files = vec![];
    for i in inputs {
        java_files(i, &mut files)?;
    }
    let annotator = AnnotatorConfig::default();
    let mut records = vec![];
    let mut failures = 0;
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| CliError::io(f, e))?;
        manifest.input(f)?;
        let id = f.display().to_string();
        let outcome = annotate_by_imports(SourceUnit::new(id.clone(), text, library), &annotator);
        for u in &outcome.unresolved {
            tracing::warn!(unit = %id, name = %u.name, offset = u.offset, "unresolved name");
        }
        failures += outcome.unresolved.len();
        records.push(outcome.unit.to_record());
    }
    let mut bytes = vec![];
    write_corpus(&mut bytes, &records)?;
    manifest.failures = failures;
    emit(out, &bytes, &mut manifest)?;
    Ok(Outcome::new(manifest, failures))
}

pub fn cmd_gen_prompts(corpus: &Path, cfg: &RunConfig, out_dir: &Path, gzip: bool) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("gen-prompts", cfg);
    let vocab = load_vocab(cfg, &mut manifest)?;
    let (units, failures) = load_units(corpus, &mut manifest)?;
    let prompts = gen_corpus_prompts(&units, &cfg.prompt_config(), &vocab);
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let prompt_path = out_dir.join(PROMPTS_FILE);
    let records: Vec<PromptRecord> = prompts.iter().map(|p| PromptRecord::from_prompt(p, &vocab)).collect();
    let mut bytes = vec![];
    write_jsonl(&mut bytes, &records)?;
    std::fs::write(&prompt_path, bytes).map_err(|e| CliError::io(&prompt_path, e))?;

    let training_path = out_dir.join(if gzip { format!("{TRAINING_FILE}.gz") } else { TRAINING_FILE.into() });
    let written = export_training(&training_path, &prompts, &vocab)?;
    tracing::info!(prompts = prompts.len(), training = written, "prompts generated");

    let split_path = out_dir.join(SPLIT_FILE);
    let all_fqns: Vec<&str> = units.iter().flat_map(|u| u.annotations.iter().map(|a| a.fqn.as_str())).collect();
    let split = SplitManifest::build(&prompts, all_fqns, cfg.threshold, &vocab)?;
    std::fs::write(&split_path, pretty(&split)?).map_err(|e| CliError::io(&split_path, e))?;

    for p in [&prompt_path, &training_path, &split_path] {
        manifest.output(p)?;
    }
    let outcome = Outcome::new(manifest, failures);
    outcome.manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(outcome)
}

pub fn cmd_train_scorer(training: &Path, cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("train-scorer", cfg);
    let vocab = load_vocab(cfg, &mut manifest)?;
    manifest.input(training)?;
    let records = read_training(training)?;
    let mut seqs: Vec<(Vec<TokenId>, Vec<usize>)> = Vec::with_capacity(records.len());
    let mut failures = 0;
    for r in &records {
        match r.to_ids(&vocab) {
            Ok((mut tokens, labels)) if labels.keys().all(|&k| k < tokens.len()) => {
                for (&k, &v) in &labels {
                    tokens[k] = v;
                }
                seqs.push((tokens, labels.into_keys().collect()));
            }
            Ok(_) => {
                tracing::warn!("training record label outside its sequence");
                failures += 1;
            }
            Err(e) => {
                tracing::warn!(error = %e, "skipping training record");
                failures += 1;
            }
        }
    }
    let model = train_ngram_labeled(seqs.iter().map(|(t, l)| (t.as_slice(), l.as_slice())), cfg.ngram, &vocab)?;
    model.save(out)?;
    manifest.output(out)?;
    let outcome = Outcome::new(manifest, failures);
    outcome.manifest.write(&sibling_path(out))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    pub unit_id: String,
    pub points: Vec<InferencePoint>,
}

pub fn cmd_detect(input: Option<&Path>, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("detect", cfg);
    let (id, text) = read_text(input, &mut manifest)?;
    let detection = find_points_with(&SourceUnit::new(id.clone(), text, "snippet"), &DetectConfig::default());
    for w in &detection.warnings {
        tracing::warn!(line = w.line_index, offset = w.offset, "{}", w.message);
    }
    let bytes = pretty(&DetectOutput {
        unit_id: id,
        points: detection.points,
    })?;
    emit(out, &bytes, &mut manifest)?;
    Ok(Outcome::new(manifest, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    #[serde(flatten)]
    pub point: InferencePoint,
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOutput {
    pub unit_id: String,
    pub points: Vec<PointResult>,
}

pub fn cmd_infer(input: Option<&Path>, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("infer", cfg);
    let vocab = load_vocab(cfg, &mut manifest)?;
    let backend = open_backend(cfg, &vocab, &mut manifest)?;
    let (id, text) = read_text(input, &mut manifest)?;
    let unit = AnnotatedUnit::unannotated(SourceUnit::new(id.clone(), text, "snippet"));
    let points: Vec<PointResult> = predict_all(&unit, backend.as_ref(), &cfg.search_config(), &vocab)
        .into_iter()
        .map(|o| match o.result {
            Ok(p) => PointResult {
                point: o.point,
                prediction: Some(p),
                error: None,
            },
            Err(e) => PointResult {
                point: o.point,
                prediction: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let failures = points.iter().filter(|p| p.prediction.is_none()).count();
    let bytes = pretty(&InferOutput { unit_id: id, points })?;
    manifest.failures = failures;
    emit(out, &bytes, &mut manifest)?;
    Ok(Outcome::new(manifest, failures))
}

pub fn cmd_predict_corpus(corpus: &Path, cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("predict-corpus", cfg);
    let vocab = load_vocab(cfg, &mut manifest)?;
    let backend = open_backend(cfg, &vocab, &mut manifest)?;
    let (units, skipped) = load_units(corpus, &mut manifest)?;
    let records = evaluate_corpus(&units, backend.as_ref(), &cfg.harness_config(), &vocab);
    let failed = records.iter().filter(|r| r.prediction.is_none()).count();
    let mut bytes = vec![];
    write_jsonl(&mut bytes, &records)?;
    let failures = skipped + failed;
    manifest.failures = failures;
    emit(out, &bytes, &mut manifest)?;
    Ok(Outcome::new(manifest, failures))
}

pub fn cmd_eval(
    records: &Path,
    split: &Path,
    cfg: &RunConfig,
    format: ReportFormat,
    out: Option<&Path>,
) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::new("eval", cfg);
    let vocab = load_vocab(cfg, &mut manifest)?;
    manifest.input(records)?;
    manifest.input(split)?;
    let input = open_input(records).map_err(|e| CliError::io(records, e))?;
    let rows: Vec<EvalRecord> = read_jsonl(input)?;
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} holds no records", records.display())));
    }
    let text = std::fs::read_to_string(split).map_err(|e| CliError::io(split, e))?;
    let mut m: SplitManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", split.display())))?;
    m.threshold = cfg.threshold;
    let report = split_report(&rows, &m, &vocab, &cfg.bins, cfg.aliases.as_ref());
    let bytes = match format {
        ReportFormat::Text => report.to_text().into_bytes(),
        ReportFormat::Json => pretty(&report)?,
    };
    emit(out, &bytes, &mut manifest)?;
    Ok(Outcome::new(manifest, 0))
}
