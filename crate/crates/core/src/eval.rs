//! Accuracy, subword BLEU-2, prompt similarity, API cardinality, and the
//! seen/unseen split report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::FillMaskScorer;
use crate::corpus::{make_eval_variant, AnnotatedUnit, AnnotationKind};
use crate::detect::{find_points, InferencePoint, PointKind};
use crate::infer::{build_code_prompt, predict_point, Prediction, SpanSearchConfig};
use crate::promptgen::{prompt_seed, FqnPrompt};
use crate::tokenizer::{tokenize_ids, TokenId, Vocab};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const DEFAULT_SEEN_THRESHOLD: f64 = 0.35;
pub const SIMILARITY_EDGES: [f64; 8] = [0.0, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.88];
pub const CARDINALITY_EDGES: [f64; 12] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0, 50.0, 100.0, 500.0, 1000.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records")]
    EmptyInput,
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("empty code prompt")]
    EmptyPrompt,
    #[error("similarity threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub unit_id: String,
    pub library: String,
    pub point: InferencePoint,
    pub gold_fqn: String,
    /// `None` when inference failed at this point; counted as wrong.
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Code-prompt tokens with masks removed.
    pub prompt_bag: TokenBag,
}

impl EvalRecord {
    pub fn predicted_fqn(&self) -> Option<&str> {
        self.prediction.as_ref().map(|p| p.fqn.as_str())
    }
}

/// Prefix rewrites applied to both sides before exact matching, for
/// packages that were renamed between versions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasTable {
    pub prefixes: Vec<(String, String)>,
}

impl AliasTable {
    pub fn normalize<'a>(&self, fqn: &'a str) -> std::borrow::Cow<'a, str> {
        for (from, to) in &self.prefixes {
            if let Some(rest) = fqn.strip_prefix(from.as_str()) {
                if rest.is_empty() || rest.starts_with('.') {
                    return format!("{to}{rest}").into();
                }
            }
        }
        fqn.into()
    }
}

fn is_correct(r: &EvalRecord, aliases: Option<&AliasTable>) -> bool {
    match (r.predicted_fqn(), aliases) {
        (None, _) => false,
        (Some(p), None) => p == r.gold_fqn,
        (Some(p), Some(a)) => a.normalize(p) == a.normalize(&r.gold_fqn),
    }
}

/// Fraction of records whose predicted FQN equals the gold FQN.
pub fn accuracy(records: &[EvalRecord], aliases: Option<&AliasTable>) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = records.iter().filter(|r| is_correct(r, aliases)).count();
    Ok(correct as f64 / records.len() as f64)
}

fn clipped_matches<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for g in reference.windows(n) {
        *counts.entry(g).or_default() += 1;
    }
    let mut matched = 0;
    for g in cand.windows(n) {
        if let Some(c) = counts.get_mut(g) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    (matched, cand.len() + 1 - n)
}

/// BLEU with uniform weights over 1- and 2-gram modified precisions. A zero
/// match count is replaced by [`BLEU_EPSILON`]. A one-token candidate has no
/// 2-grams and is scored on unigram precision alone.
pub fn bleu2<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let orders = candidate.len().min(2);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (m, d) = clipped_matches(candidate, reference, n);
        let m = if m > 0 { m as f64 } else { BLEU_EPSILON };
        log_sum += (m / d as f64).ln() / orders as f64;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * log_sum.exp())
}

/// BLEU-2 over the subword tokens of two FQN strings.
pub fn fqn_bleu2(predicted: &str, gold: &str, vocab: &Vocab) -> Result<f64, EvalError> {
    bleu2(&tokenize_ids(predicted, vocab), &tokenize_ids(gold, vocab))
}

/// Set of prompt tokens with the mask token removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenBag(pub BTreeSet<String>);

impl TokenBag {
    pub fn from_tokens(ids: &[TokenId], vocab: &Vocab) -> Self {
        let mask = vocab.mask_id();
        Self(
            ids.iter()
                .filter(|&&t| t != mask)
                .map(|&t| vocab.token(t).to_string())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Highest |bag ∩ P| / |bag| over training bags `P`; 0 for an empty index.
pub fn prompt_similarity(bag: &TokenBag, index: &[TokenBag]) -> Result<f64, EvalError> {
    if bag.is_empty() {
        return Err(EvalError::EmptyPrompt);
    }
    let best = index
        .iter()
        .map(|p| bag.0.intersection(&p.0).count())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / bag.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub training_fqns: BTreeSet<String>,
    pub training_bags: Vec<TokenBag>,
    pub threshold: f64,
    /// Simple name to number of distinct FQNs.
    pub cardinality: BTreeMap<String, usize>,
}

impl SplitManifest {
    /// `prompts` are the fine-tuning prompts; `all_fqns` spans every FQN
    /// known in the corpus, for cardinality.
    pub fn build<'a>(
        prompts: &[FqnPrompt],
        all_fqns: impl IntoIterator<Item = &'a str>,
        threshold: f64,
        vocab: &Vocab,
    ) -> Result<Self, EvalError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(EvalError::InvalidThreshold(threshold));
        }
        let training_fqns: BTreeSet<String> = prompts.iter().flat_map(|p| p.masked_fqns.iter().cloned()).collect();
        let mut distinct: BTreeSet<&str> = all_fqns.into_iter().collect();
        distinct.extend(training_fqns.iter().map(String::as_str));
        let mut cardinality = BTreeMap::new();
        for fqn in distinct {
            *cardinality.entry(simple_name(fqn).to_string()).or_default() += 1;
        }
        Ok(Self {
            training_bags: prompts.iter().map(|p| TokenBag::from_tokens(&p.tokens, vocab)).collect(),
            training_fqns,
            threshold,
            cardinality,
        })
    }
}

fn simple_name(fqn: &str) -> &str {
    fqn.rsplit('.').next().unwrap_or(fqn)
}

pub fn cardinality(simple_name: &str, manifest: &SplitManifest) -> usize {
    manifest.cardinality.get(simple_name).copied().unwrap_or(0)
}

/// Upper-edge bins: `(-inf, e0], (e0, e1], ..., (e_last, +inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBins {
    pub similarity: Vec<f64>,
    pub cardinality: Vec<f64>,
}

impl Default for ReportBins {
    fn default() -> Self {
        Self {
            similarity: SIMILARITY_EDGES.to_vec(),
            cardinality: CARDINALITY_EDGES.to_vec(),
        }
    }
}

pub fn bin_index(edges: &[f64], x: f64) -> usize {
    edges.iter().filter(|&&e| e < x).count()
}

pub fn bin_labels(edges: &[f64]) -> Vec<String> {
    let mut out = Vec::with_capacity(edges.len() + 1);
    if let Some(first) = edges.first() {
        out.push(format!("<={first}"));
    }
    for w in edges.windows(2) {
        out.push(format!("({}, {}]", w[0], w[1]));
    }
    match edges.last() {
        Some(last) => out.push(format!(">{last}")),
        None => out.push("all".into()),
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub mean_bleu2: Option<f64>,
    #[serde(skip)]
    bleu_sum: f64,
}

impl CellStats {
    fn add(&mut self, correct: bool, bleu: f64) {
        self.count += 1;
        self.correct += usize::from(correct);
        self.bleu_sum += bleu;
        self.accuracy = Some(self.correct as f64 / self.count as f64);
        self.mean_bleu2 = Some(self.bleu_sum / self.count as f64);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    SeenApiSeenContext,
    SeenApiUnseenContext,
    UnseenApiSeenContext,
    UnseenApiUnseenContext,
}

impl Split {
    pub fn classify(gold_in_training: bool, similarity: f64, threshold: f64) -> Self {
        match (gold_in_training, similarity > threshold) {
            (true, true) => Split::SeenApiSeenContext,
            (true, false) => Split::SeenApiUnseenContext,
            (false, true) => Split::UnseenApiSeenContext,
            (false, false) => Split::UnseenApiUnseenContext,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub label: String,
    pub stats: CellStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub overall: CellStats,
    pub splits: BTreeMap<Split, CellStats>,
    pub similarity_bins: Vec<BinRow>,
    pub cardinality_bins: Vec<BinRow>,
    pub by_kind: BTreeMap<PointKind, CellStats>,
    pub by_library: BTreeMap<String, CellStats>,
    pub threshold: f64,
}

/// Per-record classification used by [`split_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub correct: bool,
    pub bleu2: f64,
    /// `None` when the prompt bag is empty; such records fall in the lowest bin.
    pub similarity: Option<f64>,
    pub cardinality: usize,
    pub split: Split,
}

pub fn score_record(
    r: &EvalRecord,
    manifest: &SplitManifest,
    vocab: &Vocab,
    aliases: Option<&AliasTable>,
) -> RecordScore {
    let gold = tokenize_ids(&r.gold_fqn, vocab);
    let cand = r.predicted_fqn().map(|p| tokenize_ids(p, vocab)).unwrap_or_default();
    let bleu = bleu2(&cand, &gold).unwrap_or(0.0);
    let similarity = prompt_similarity(&r.prompt_bag, &manifest.training_bags).ok();
    RecordScore {
        correct: is_correct(r, aliases),
        bleu2: bleu,
        similarity,
        cardinality: cardinality(simple_name(&r.gold_fqn), manifest),
        split: Split::classify(
            manifest.training_fqns.contains(&r.gold_fqn),
            similarity.unwrap_or(0.0),
            manifest.threshold,
        ),
    }
}

pub fn split_report(
    records: &[EvalRecord],
    manifest: &SplitManifest,
    vocab: &Vocab,
    bins: &ReportBins,
    aliases: Option<&AliasTable>,
) -> SplitReport {
    let scores: Vec<RecordScore> = records
        .par_iter()
        .map(|r| score_record(r, manifest, vocab, aliases))
        .collect();
    let rows = |edges: &[f64]| -> Vec<BinRow> {
        bin_labels(edges)
            .into_iter()
            .map(|label| BinRow {
                label,
                stats: CellStats::default(),
            })
            .collect()
    };
    let mut report = SplitReport {
        overall: CellStats::default(),
        splits: BTreeMap::new(),
        similarity_bins: rows(&bins.similarity),
        cardinality_bins: rows(&bins.cardinality),
        by_kind: BTreeMap::new(),
        by_library: BTreeMap::new(),
        threshold: manifest.threshold,
    };
    for (r, s) in records.iter().zip(&scores) {
        report.overall.add(s.correct, s.bleu2);
        report.splits.entry(s.split).or_default().add(s.correct, s.bleu2);
        let si = s.similarity.map_or(0, |x| bin_index(&bins.similarity, x));
        report.similarity_bins[si].stats.add(s.correct, s.bleu2);
        let ci = bin_index(&bins.cardinality, s.cardinality as f64);
        report.cardinality_bins[ci].stats.add(s.correct, s.bleu2);
        report.by_kind.entry(r.point.kind).or_default().add(s.correct, s.bleu2);
        report.by_library.entry(r.library.clone()).or_default().add(s.correct, s.bleu2);
    }
    report
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

impl SplitReport {
    /// Plain-text tables in the layout of the paper's result tables.
    pub fn to_text(&self) -> String {
        let total = self.overall.count.max(1) as f64;
        let mut out = String::new();
        let table = |out: &mut String, title: &str, head: &str, rows: Vec<(String, &CellStats)>| {
            let _ = writeln!(out, "{title}");
            let _ = writeln!(out, "{head:<24} {:>8} {:>8} {:>8} {:>8}", "count", "share%", "acc", "bleu2");
            for (label, s) in rows {
                let _ = writeln!(
                    out,
                    "{label:<24} {:>8} {:>8.1} {:>8} {:>8}",
                    s.count,
                    100.0 * s.count as f64 / total,
                    fmt_opt(s.accuracy),
                    fmt_opt(s.mean_bleu2)
                );
            }
            out.push('\n');
        };
        table(&mut out, "Overall", "", vec![("all".into(), &self.overall)]);
        table(
            &mut out,
            &format!("Seen/unseen split (context seen iff similarity > {})", self.threshold),
            "split",
            self.splits.iter().map(|(k, v)| (format!("{k:?}"), v)).collect(),
        );
        table(
            &mut out,
            "Prompt similarity",
            "range",
            self.similarity_bins.iter().map(|b| (b.label.clone(), &b.stats)).collect(),
        );
        table(
            &mut out,
            "API cardinality",
            "cardinality",
            self.cardinality_bins.iter().map(|b| (b.label.clone(), &b.stats)).collect(),
        );
        table(
            &mut out,
            "By point kind",
            "kind",
            self.by_kind.iter().map(|(k, v)| (format!("{k:?}"), v)).collect(),
        );
        table(
            &mut out,
            "By library",
            "library",
            self.by_library.iter().map(|(k, v)| (k.clone(), v)).collect(),
        );
        out
    }
}

/// Gold FQN for a detected point: the annotation on the same name.
pub fn gold_for_point<'a>(unit: &'a AnnotatedUnit, point: &InferencePoint) -> Option<&'a str> {
    let kind = match point.kind {
        PointKind::DeclType | PointKind::NewType => AnnotationKind::TypeName,
        PointKind::Receiver => AnnotationKind::Receiver,
    };
    unit.line_annotations(point.line_index)
        .find(|(_, a)| a.kind == kind && a.span == point.span)
        .map(|(_, a)| a.fqn.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub search: SpanSearchConfig,
    /// Remove 0-2 declaration lines per unit before detection.
    pub eval_variants: bool,
    pub seed: u64,
}

/// Detect points in a unit, predict each one that has a gold annotation,
/// and produce evaluation records in point order.
pub fn evaluate_unit(
    unit: &AnnotatedUnit,
    backend: &dyn FillMaskScorer,
    cfg: &HarnessConfig,
    vocab: &Vocab,
) -> Vec<EvalRecord> {
    let working = if cfg.eval_variants {
        make_eval_variant(unit, prompt_seed(cfg.seed, &unit.unit.id, usize::MAX)).unit
    } else {
        unit.clone()
    };
    let s = &cfg.search;
    find_points(&working.unit)
        .into_iter()
        .filter_map(|point| {
            let gold = gold_for_point(&working, &point)?.to_string();
            let bag = build_code_prompt(&working, &point, s.min_len, s.setting, s.radius, s.window, vocab)
                .map(|p| TokenBag::from_tokens(&p.tokens, vocab))
                .unwrap_or_default();
            let (prediction, error) = match predict_point(&working, &point, backend, s, vocab) {
                Ok(p) => (Some(p), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Some(EvalRecord {
                unit_id: working.unit.id.clone(),
                library: working.unit.library.clone(),
                point,
                gold_fqn: gold,
                prediction,
                error,
                prompt_bag: bag,
            })
        })
        .collect()
}

pub fn evaluate_corpus(
    units: &[AnnotatedUnit],
    backend: &dyn FillMaskScorer,
    cfg: &HarnessConfig,
    vocab: &Vocab,
) -> Vec<EvalRecord> {
    units
        .par_iter()
        .map(|u| evaluate_unit(u, backend, cfg, vocab))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}
