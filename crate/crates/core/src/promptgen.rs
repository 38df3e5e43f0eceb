//! Masked FQN prompts for fine-tuning and the shared window fitter.
//!
//! A prompt is built from a focus line and up to `t` lines on either side.
//! Context lines are rendered with their annotations expanded to FQNs; in the
//! focus line the inserted FQN text is tokenized and (some of) its tokens are
//! replaced by the mask token. Labels keep the original tokens.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnnotatedUnit, AnnotationKind, FqnAnnotation};
use crate::tokenizer::{tokenize_ids, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("focus line needs {focus_len} tokens but the window holds {window}")]
pub struct WindowOverflow {
    pub focus_len: usize,
    pub window: usize,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unit {unit:?} line {line}: no maskable FQN tokens")]
    NoMaskableTokens { unit: String, line: usize },
    #[error(transparent)]
    WindowOverflow(#[from] WindowOverflow),
    #[error("mask ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("line {line} out of range for unit with {lines} lines")]
    LineOutOfRange { line: usize, lines: usize },
    #[error("unknown token {0:?} in training record")]
    UnknownToken(String),
    #[error("training record {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Line indices around a focus line, nearest last for the prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub prefix: Vec<usize>,
    pub focus: usize,
    pub suffix: Vec<usize>,
}

pub fn collect_context(unit: &AnnotatedUnit, focus: usize, t: usize) -> Result<ContextBlock, PromptError> {
    let n = unit.lines.len();
    if focus >= n {
        return Err(PromptError::LineOutOfRange { line: focus, lines: n });
    }
    Ok(ContextBlock {
        prefix: (focus.saturating_sub(t)..focus).collect(),
        focus,
        suffix: (focus + 1..n.min(focus + 1 + t)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskStrategy {
    FullSpan,
    Random { ratio: f64 },
}

impl MaskStrategy {
    pub fn random(ratio: f64) -> Result<Self, PromptError> {
        let s = MaskStrategy::Random { ratio };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match *self {
            MaskStrategy::Random { ratio } if !(ratio > 0.0 && ratio <= 1.0) => Err(PromptError::InvalidRatio(ratio)),
            _ => Ok(()),
        }
    }

    fn count(&self, n: usize) -> usize {
        match *self {
            MaskStrategy::FullSpan => n,
            MaskStrategy::Random { ratio } => ((ratio * n as f64).round() as usize).clamp(1, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub radius: usize,
    pub strategy: MaskStrategy,
    pub window: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            radius: 2,
            strategy: MaskStrategy::FullSpan,
            window: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FqnPrompt {
    pub unit_id: String,
    pub line_index: usize,
    /// Masked sequence.
    pub tokens: Vec<TokenId>,
    /// Masked position to original token.
    pub labels: BTreeMap<usize, TokenId>,
    /// Every position inside an inserted FQN, masked or not.
    pub region_positions: Vec<usize>,
    /// Token range of the focus line.
    pub focus: (usize, usize),
    /// Lines that survived window fitting.
    pub block: ContextBlock,
    pub masked_fqns: Vec<String>,
    pub truncated: bool,
}

impl FqnPrompt {
    /// The unmasked sequence.
    pub fn original(&self) -> Vec<TokenId> {
        let mut out = self.tokens.clone();
        for (&p, &t) in &self.labels {
            out[p] = t;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    Text(&'a str),
    Region(&'a str),
    Masks(usize),
}

/// Replace byte range `at` of a line with `piece`. Zero-width ranges insert.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Edit<'a> {
    pub at: (usize, usize),
    pub piece: Piece<'a>,
}

pub(crate) fn annotation_edit(a: &FqnAnnotation, region: bool) -> Edit<'_> {
    let text = a.inserted_text();
    let piece = if region { Piece::Region(text) } else { Piece::Text(text) };
    let at = match a.kind {
        AnnotationKind::TypeName => (a.span.0, a.span.0),
        AnnotationKind::Receiver => a.span,
    };
    Edit { at, piece }
}

/// Tokenize a line with edits applied. Returns the tokens and the positions
/// produced by region pieces. Edits must not overlap.
pub(crate) fn render_line(text: &str, mut edits: Vec<Edit<'_>>, vocab: &Vocab) -> (Vec<TokenId>, Vec<usize>) {
    edits.sort_by_key(|e| e.at);
    let mut tokens = Vec::new();
    let mut regions = Vec::new();
    let mut cursor = 0;
    for e in edits {
        tokens.extend(tokenize_ids(&text[cursor..e.at.0], vocab));
        match e.piece {
            Piece::Text(s) => tokens.extend(tokenize_ids(s, vocab)),
            Piece::Region(s) => {
                let before = tokens.len();
                tokens.extend(tokenize_ids(s, vocab));
                regions.extend(before..tokens.len());
            }
            Piece::Masks(n) => tokens.extend(std::iter::repeat(vocab.mask_id()).take(n)),
        }
        cursor = e.at.1;
    }
    tokens.extend(tokenize_ids(&text[cursor..], vocab));
    (tokens, regions)
}

/// Context line with every annotation expanded.
pub(crate) fn expanded_line(unit: &AnnotatedUnit, line: usize, vocab: &Vocab) -> Vec<TokenId> {
    let edits = unit.line_annotations(line).map(|(_, a)| annotation_edit(a, false)).collect();
    render_line(&unit.lines[line].text, edits, vocab).0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fitted {
    pub tokens: Vec<TokenId>,
    pub focus: (usize, usize),
    /// Innermost prefix and suffix lines that kept at least one token.
    pub kept_prefix: usize,
    pub kept_suffix: usize,
    pub truncated: bool,
}

/// Fit prefix lines, focus line and suffix lines into `window` tokens.
///
/// Whole context lines go first, alternating outermost suffix then
/// outermost prefix, while the overflow is at least that line's length.
/// The remainder is trimmed one token at a time from the right end of the
/// suffix and the left end of the prefix, alternating. The focus line is
/// never cut.
pub fn fit_window(
    prefix: Vec<Vec<TokenId>>,
    focus: Vec<TokenId>,
    suffix: Vec<Vec<TokenId>>,
    window: usize,
) -> Result<Fitted, WindowOverflow> {
    if focus.len() > window {
        return Err(WindowOverflow {
            focus_len: focus.len(),
            window,
        });
    }
    let mut prefix: std::collections::VecDeque<Vec<TokenId>> = prefix.into();
    let mut suffix = suffix;
    let total = prefix.iter().chain(&suffix).map(Vec::len).sum::<usize>() + focus.len();
    let mut overflow = total.saturating_sub(window);
    let truncated = overflow > 0;

    let mut from_suffix = true;
    while overflow > 0 {
        let side_has = |s: bool, p: &std::collections::VecDeque<Vec<TokenId>>, x: &Vec<Vec<TokenId>>| {
            if s {
                !x.is_empty()
            } else {
                !p.is_empty()
            }
        };
        if !side_has(from_suffix, &prefix, &suffix) {
            from_suffix = !from_suffix;
        }
        let len = if from_suffix {
            suffix.last().map(Vec::len)
        } else {
            prefix.front().map(Vec::len)
        };
        match len {
            Some(len) if len <= overflow => {
                if from_suffix {
                    suffix.pop();
                } else {
                    prefix.pop_front();
                }
                overflow -= len;
                from_suffix = !from_suffix;
            }
            _ => break,
        }
    }

    let mut pre: std::collections::VecDeque<TokenId> = prefix.iter().flatten().copied().collect();
    let mut suf: Vec<TokenId> = suffix.iter().flatten().copied().collect();
    let mut from_suffix = true;
    while overflow > 0 {
        if from_suffix && suf.pop().is_some() || !from_suffix && pre.pop_front().is_some() {
            overflow -= 1;
        } else if suf.is_empty() && pre.is_empty() {
            break;
        }
        from_suffix = !from_suffix;
    }

    let kept = |lines: &mut dyn Iterator<Item = usize>, mut budget: usize| {
        let mut k = 0;
        for len in lines {
            if budget == 0 {
                break;
            }
            k += 1;
            budget = budget.saturating_sub(len);
        }
        k
    };
    let kept_prefix = kept(&mut prefix.iter().rev().map(Vec::len), pre.len());
    let kept_suffix = kept(&mut suffix.iter().map(Vec::len), suf.len());

    let mut tokens: Vec<TokenId> = pre.into_iter().collect();
    let start = tokens.len();
    tokens.extend(&focus);
    let end = tokens.len();
    tokens.extend(suf);
    Ok(Fitted {
        tokens,
        focus: (start, end),
        kept_prefix,
        kept_suffix,
        truncated,
    })
}

/// Per-prompt RNG seed from the run seed, unit id and line.
pub fn prompt_seed(seed: u64, unit_id: &str, line: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(unit_id.as_bytes());
    h.update([0]);
    h.update((line as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn mask_focus(
    unit: &AnnotatedUnit,
    block: &ContextBlock,
    strategy: MaskStrategy,
    vocab: &Vocab,
    seed: u64,
    window: usize,
) -> Result<FqnPrompt, PromptError> {
    strategy.validate()?;
    let line = block.focus;
    let edits = unit.line_annotations(line).map(|(_, a)| annotation_edit(a, true)).collect();
    let (focus, regions) = render_line(&unit.lines[line].text, edits, vocab);
    if regions.is_empty() {
        return Err(PromptError::NoMaskableTokens {
            unit: unit.unit.id.clone(),
            line,
        });
    }

    let chosen: Vec<usize> = match strategy {
        MaskStrategy::FullSpan => regions.clone(),
        MaskStrategy::Random { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(prompt_seed(seed, &unit.unit.id, line));
            let mut idx = sample(&mut rng, regions.len(), strategy.count(regions.len())).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| regions[i]).collect()
        }
    };

    let prefix = block.prefix.iter().map(|&l| expanded_line(unit, l, vocab)).collect();
    let suffix = block.suffix.iter().map(|&l| expanded_line(unit, l, vocab)).collect();
    let fitted = fit_window(prefix, focus, suffix, window)?;
    let offset = fitted.focus.0;

    let mut tokens = fitted.tokens;
    let mut labels = BTreeMap::new();
    for p in chosen {
        labels.insert(offset + p, tokens[offset + p]);
        tokens[offset + p] = vocab.mask_id();
    }
    Ok(FqnPrompt {
        unit_id: unit.unit.id.clone(),
        line_index: line,
        tokens,
        labels,
        region_positions: regions.into_iter().map(|p| offset + p).collect(),
        focus: fitted.focus,
        block: ContextBlock {
            prefix: block.prefix[block.prefix.len() - fitted.kept_prefix..].to_vec(),
            focus: line,
            suffix: block.suffix[..fitted.kept_suffix].to_vec(),
        },
        masked_fqns: unit.line_annotations(line).map(|(_, a)| a.fqn.clone()).collect(),
        truncated: fitted.truncated,
    })
}

/// One prompt per annotated line, in line order. Lines without maskable
/// tokens or whose focus overflows the window are skipped with a warning;
/// exact duplicates are dropped.
pub fn gen_prompts(unit: &AnnotatedUnit, config: &PromptConfig, vocab: &Vocab) -> Vec<FqnPrompt> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in 0..unit.lines.len() {
        if !unit.has_annotations(line) {
            continue;
        }
        let block = match collect_context(unit, line, config.radius) {
            Ok(b) => b,
            Err(e) => {
                tracing::warn!(error = %e, "skipping line");
                continue;
            }
        };
        match mask_focus(unit, &block, config.strategy, vocab, config.seed, config.window) {
            Ok(p) => {
                if seen.insert((p.tokens.clone(), p.labels.clone())) {
                    out.push(p);
                }
            }
            Err(e) => tracing::warn!(unit = %unit.unit.id, line, error = %e, "skipping prompt"),
        }
    }
    out
}

/// Prompts for a whole corpus in unit order, generated in parallel and
/// deduplicated across units.
pub fn gen_corpus_prompts(units: &[AnnotatedUnit], config: &PromptConfig, vocab: &Vocab) -> Vec<FqnPrompt> {
    let per_unit: Vec<Vec<FqnPrompt>> = units.par_iter().map(|u| gen_prompts(u, config, vocab)).collect();
    let mut seen = HashSet::new();
    per_unit
        .into_iter()
        .flatten()
        .filter(|p| seen.insert((p.tokens.clone(), p.labels.clone())))
        .collect()
}

/// Fine-tuning record exchanged with the masked-LM trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub tokens: Vec<String>,
    pub labels: BTreeMap<usize, String>,
}

impl TrainingRecord {
    pub fn from_prompt(p: &FqnPrompt, vocab: &Vocab) -> Self {
        Self {
            tokens: vocab.to_strings(&p.tokens),
            labels: p.labels.iter().map(|(&k, &v)| (k, vocab.token(v).to_string())).collect(),
        }
    }

    /// Back to token ids; fails on tokens outside the vocabulary.
    pub fn to_ids(&self, vocab: &Vocab) -> Result<(Vec<TokenId>, BTreeMap<usize, TokenId>), PromptError> {
        let id = |t: &String| vocab.id(t).ok_or_else(|| PromptError::UnknownToken(t.clone()));
        let tokens = self.tokens.iter().map(id).collect::<Result<_, _>>()?;
        let labels = self
            .labels
            .iter()
            .map(|(&k, v)| Ok((k, id(v)?)))
            .collect::<Result<_, PromptError>>()?;
        Ok((tokens, labels))
    }
}

/// Prompt file record: the training fields plus provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub unit_id: String,
    pub line_index: usize,
    pub tokens: Vec<String>,
    pub labels: BTreeMap<usize, String>,
    pub masked_fqns: Vec<String>,
    pub context_lines: Vec<usize>,
    pub truncated: bool,
}

impl PromptRecord {
    pub fn from_prompt(p: &FqnPrompt, vocab: &Vocab) -> Self {
        let t = TrainingRecord::from_prompt(p, vocab);
        Self {
            unit_id: p.unit_id.clone(),
            line_index: p.line_index,
            tokens: t.tokens,
            labels: t.labels,
            masked_fqns: p.masked_fqns.clone(),
            context_lines: p.block.prefix.iter().chain(&p.block.suffix).copied().collect(),
            truncated: p.truncated,
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn create_output(path: &Path) -> std::io::Result<Box<dyn Write>> {
    let file = BufWriter::new(File::create(path)?);
    Ok(if is_gz(path) {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    })
}

pub fn open_input(path: &Path) -> std::io::Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    Ok(if is_gz(path) {
        Box::new(BufReader::new(Box::new(GzDecoder::new(file)) as Box<dyn Read>))
    } else {
        Box::new(BufReader::new(file))
    })
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(out: &mut dyn Write, items: &[T]) -> Result<(), PromptError> {
    for item in items {
        serde_json::to_writer(&mut *out, item).map_err(|source| PromptError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<Vec<T>, PromptError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PromptError::Json { line: n + 1, source })?);
    }
    Ok(out)
}

/// Export prompts as training records. Prompts without labels are skipped.
/// Gzip is used when the path ends in `.gz`. Returns the number written.
pub fn export_training(path: &Path, prompts: &[FqnPrompt], vocab: &Vocab) -> Result<usize, PromptError> {
    let records: Vec<TrainingRecord> = prompts
        .iter()
        .filter(|p| !p.labels.is_empty())
        .map(|p| TrainingRecord::from_prompt(p, vocab))
        .collect();
    let mut out = create_output(path)?;
    write_jsonl(&mut out, &records)?;
    out.flush()?;
    drop(out);
    Ok(records.len())
}

pub fn read_training(path: &Path) -> Result<Vec<TrainingRecord>, PromptError> {
    let records: Vec<TrainingRecord> = read_jsonl(open_input(path)?)?;
    let before = records.len();
    let records: Vec<_> = records.into_iter().filter(|r| !r.labels.is_empty()).collect();
    if records.len() < before {
        tracing::warn!(skipped = before - records.len(), "training records without labels");
    }
    Ok(records)
}
