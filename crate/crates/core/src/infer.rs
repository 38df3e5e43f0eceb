//! Span-length search over code prompts.
//!
//! For an inference point, `L` mask tokens are inserted at the point (before
//! a type name, or in place of a receiver) for every `L` in a configured
//! range. Each prompt is scored, the argmax token is kept per mask, and the
//! length whose argmax probabilities aggregate highest wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, FillMaskScorer, ScoreRequest};
use crate::corpus::AnnotatedUnit;
use crate::detect::{find_points, InferencePoint, PointKind};
use crate::promptgen::{annotation_edit, expanded_line, fit_window, render_line, Edit, Piece, WindowOverflow};
use crate::tokenizer::{detokenize, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferError {
    #[error("inference point not found: {0}")]
    PointNotFound(String),
    #[error(transparent)]
    WindowOverflow(#[from] WindowOverflow),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no span length produced a decodable prediction")]
    Undecodable,
    #[error("invalid span search config: {0}")]
    InvalidConfig(String),
}

/// Which annotations are expanded in the prompt around a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    /// All other annotations in the block are expanded to their FQNs.
    LeaveOneOut,
    /// The code is used exactly as written.
    AllUnknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    ArithmeticMean,
    GeometricMean,
}

impl Aggregate {
    pub fn apply(self, probs: &[f64]) -> f64 {
        let n = probs.len() as f64;
        match self {
            Aggregate::ArithmeticMean => probs.iter().sum::<f64>() / n,
            Aggregate::GeometricMean => (probs.iter().map(|p| p.ln()).sum::<f64>() / n).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpanSearchConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub aggregate: Aggregate,
    pub window: usize,
    pub radius: usize,
    pub top_k: usize,
    pub setting: PromptSetting,
    pub parallel: bool,
}

impl Default for SpanSearchConfig {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 69,
            aggregate: Aggregate::ArithmeticMean,
            window: 512,
            radius: 2,
            top_k: 10,
            setting: PromptSetting::LeaveOneOut,
            parallel: true,
        }
    }
}

impl SpanSearchConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(InferError::InvalidConfig(format!(
                "span range [{}, {}] is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if self.top_k == 0 || self.window == 0 {
            return Err(InferError::InvalidConfig("top_k and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodePrompt {
    pub tokens: Vec<TokenId>,
    /// Token range of the inserted masks.
    pub masks: (usize, usize),
    pub focus: (usize, usize),
    pub truncated: bool,
}

fn check_point(unit: &AnnotatedUnit, point: &InferencePoint) -> Result<(), InferError> {
    let line = unit.lines.get(point.line_index).ok_or_else(|| {
        InferError::PointNotFound(format!("line {} of {}", point.line_index, unit.lines.len()))
    })?;
    let (s, e) = point.span;
    if s >= e || e > line.text.len() || line.text.get(s..e) != Some(point.simple_name.as_str()) {
        return Err(InferError::PointNotFound(format!(
            "{:?} not at {:?} of line {}",
            point.simple_name, point.span, point.line_index
        )));
    }
    Ok(())
}

/// Prompt with `len` masks at `point`. Under leave-one-out every annotation
/// in the block except the one on the point itself is expanded.
pub fn build_code_prompt(
    unit: &AnnotatedUnit,
    point: &InferencePoint,
    len: usize,
    setting: PromptSetting,
    radius: usize,
    window: usize,
    vocab: &Vocab,
) -> Result<CodePrompt, InferError> {
    check_point(unit, point)?;
    let li = point.line_index;
    let (ps, pe) = point.span;
    let mut edits: Vec<Edit<'_>> = Vec::new();
    if setting == PromptSetting::LeaveOneOut {
        edits.extend(
            unit.line_annotations(li)
                .filter(|(_, a)| a.span.1 <= ps || a.span.0 >= pe)
                .map(|(_, a)| annotation_edit(a, false)),
        );
    }
    let at = match point.kind {
        PointKind::DeclType | PointKind::NewType => (ps, ps),
        PointKind::Receiver => (ps, pe),
    };
    edits.push(Edit {
        at,
        piece: Piece::Masks(len),
    });
    let (focus, _) = render_line(&unit.lines[li].text, edits, vocab);
    let mask = vocab.mask_id();
    let local = focus.iter().position(|&t| t == mask).unwrap_or(0);

    let ctx = |l: usize| match setting {
        PromptSetting::LeaveOneOut => expanded_line(unit, l, vocab),
        PromptSetting::AllUnknown => render_line(&unit.lines[l].text, Vec::new(), vocab).0,
    };
    let prefix = (li.saturating_sub(radius)..li).map(ctx).collect();
    let suffix = (li + 1..unit.lines.len().min(li + 1 + radius)).map(ctx).collect();
    let fitted = fit_window(prefix, focus, suffix, window)?;
    let start = fitted.focus.0 + local;
    Ok(CodePrompt {
        tokens: fitted.tokens,
        masks: (start, start + len),
        focus: fitted.focus,
        truncated: fitted.truncated,
    })
}

/// Outcome of one span length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthScore {
    pub len: usize,
    pub score: f64,
    pub decodable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fqn: String,
    /// Detokenized argmax tokens of the winning length.
    pub decoded: String,
    pub span_len: usize,
    pub score: f64,
    pub tokens: Vec<String>,
    pub token_probs: Vec<f64>,
    /// The highest-scoring length did not decode; a runner-up was used.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<LengthScore>,
}

struct Trial {
    len: usize,
    tokens: Vec<TokenId>,
    probs: Vec<f64>,
    score: f64,
    decoded: Option<String>,
}

fn run_length(
    unit: &AnnotatedUnit,
    point: &InferencePoint,
    len: usize,
    backend: &dyn FillMaskScorer,
    cfg: &SpanSearchConfig,
    vocab: &Vocab,
) -> Result<Option<Trial>, InferError> {
    let prompt = match build_code_prompt(unit, point, len, cfg.setting, cfg.radius, cfg.window, vocab) {
        Ok(p) => p,
        Err(InferError::WindowOverflow(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let request = ScoreRequest {
        tokens: prompt.tokens,
        mask_positions: (prompt.masks.0..prompt.masks.1).collect(),
        top_k: cfg.top_k,
    };
    let dist = backend.score(&request)?;
    dist.validate(len, cfg.top_k)?;
    let (tokens, probs): (Vec<TokenId>, Vec<f64>) = (0..len)
        .map(|i| {
            let t = dist.argmax(i).expect("validated");
            (t.token, t.p)
        })
        .unzip();
    let decoded = detokenize(&tokens, vocab).ok().filter(|s| !s.is_empty());
    Ok(Some(Trial {
        len,
        score: cfg.aggregate.apply(&probs),
        tokens,
        probs,
        decoded,
    }))
}

/// Sweep span lengths at one point and return the best decodable guess.
pub fn predict_point(
    unit: &AnnotatedUnit,
    point: &InferencePoint,
    backend: &dyn FillMaskScorer,
    cfg: &SpanSearchConfig,
    vocab: &Vocab,
) -> Result<Prediction, InferError> {
    cfg.validate()?;
    check_point(unit, point)?;
    let lengths: Vec<usize> = (cfg.min_len..=cfg.max_len).collect();
    let run = |&len: &usize| run_length(unit, point, len, backend, cfg, vocab);
    let results: Vec<Result<Option<Trial>, InferError>> = if cfg.parallel {
        lengths.par_iter().map(run).collect()
    } else {
        lengths.iter().map(run).collect()
    };
    let mut trials = Vec::with_capacity(results.len());
    for r in results {
        if let Some(t) = r? {
            trials.push(t);
        }
    }
    if trials.is_empty() {
        let line_len = unit.lines[point.line_index].text.len();
        return Err(InferError::WindowOverflow(WindowOverflow {
            focus_len: line_len + cfg.min_len,
            window: cfg.window,
        }));
    }

    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.score > trials[best].score {
            best = i;
        }
    }
    let fallback = trials[best].decoded.is_none();
    if fallback {
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.sort_by(|&a, &b| trials[b].score.total_cmp(&trials[a].score).then(trials[a].len.cmp(&trials[b].len)));
        best = order
            .into_iter()
            .find(|&i| trials[i].decoded.is_some())
            .ok_or(InferError::Undecodable)?;
        tracing::debug!(point = %point.simple_name, len = trials[best].len, "fell back to runner-up length");
    }

    let sweep = trials
        .iter()
        .map(|t| LengthScore {
            len: t.len,
            score: t.score,
            decodable: t.decoded.is_some(),
        })
        .collect();
    let win = &trials[best];
    let decoded = win.decoded.clone().unwrap();
    let fqn = match point.kind {
        PointKind::DeclType | PointKind::NewType => format!("{decoded}{}", point.simple_name),
        PointKind::Receiver => decoded.clone(),
    };
    Ok(Prediction {
        fqn,
        decoded,
        span_len: win.len,
        score: win.score,
        tokens: vocab.to_strings(&win.tokens),
        token_probs: win.probs.clone(),
        fallback,
        sweep,
    })
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub point: InferencePoint,
    pub result: Result<Prediction, InferError>,
}

/// Detect points in the unit and predict each one. Per-point failures are
/// returned alongside successes.
pub fn predict_all(
    unit: &AnnotatedUnit,
    backend: &dyn FillMaskScorer,
    cfg: &SpanSearchConfig,
    vocab: &Vocab,
) -> Vec<PointOutcome> {
    find_points(&unit.unit)
        .into_iter()
        .map(|point| {
            let result = predict_point(unit, &point, backend, cfg, vocab);
            if let Err(e) = &result {
                tracing::warn!(unit = %unit.unit.id, point = %point.simple_name, error = %e, "prediction failed");
            }
            PointOutcome { point, result }
        })
        .collect()
}
