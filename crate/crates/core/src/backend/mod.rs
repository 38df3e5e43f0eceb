//! Fill-mask scoring backends.
//!
//! A backend receives a token sequence with mask positions and returns, for
//! each mask, a ranked list of candidate tokens with probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{TokenId, Vocab};

pub mod ngram;
pub mod remote;
pub mod scripted;

pub use ngram::{train_ngram, train_ngram_labeled, NgramConfig, NgramError, NgramModel, NgramScorer};
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{ScriptFixture, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("invalid score request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScoreRequest {
    pub tokens: Vec<TokenId>,
    /// Strictly increasing; every position holds the mask token.
    pub mask_positions: Vec<usize>,
    pub top_k: usize,
}

impl ScoreRequest {
    /// Request scoring every mask token in `tokens`.
    pub fn new(tokens: Vec<TokenId>, top_k: usize, vocab: &Vocab) -> Self {
        let mask = vocab.mask_id();
        let mask_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask)
            .map(|(i, _)| i)
            .collect();
        Self {
            tokens,
            mask_positions,
            top_k,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::InvalidRequest(m));
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.mask_positions.is_empty() {
            return bad("no mask positions".into());
        }
        if let Some(t) = self.tokens.iter().find(|t| !vocab.contains_id(**t)) {
            return bad(format!("token id {} outside vocabulary", t.0));
        }
        let mut prev = None;
        for &p in &self.mask_positions {
            if prev.is_some_and(|q| p <= q) {
                return bad("mask positions not strictly increasing".into());
            }
            if self.tokens.get(p) != Some(&vocab.mask_id()) {
                return bad(format!("position {p} does not hold the mask token"));
            }
            prev = Some(p);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: TokenId,
    pub p: f64,
}

/// One ranked candidate list per mask position, in request order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskDistribution {
    pub positions: Vec<Vec<TokenProb>>,
}

impl MaskDistribution {
    pub fn argmax(&self, i: usize) -> Option<TokenProb> {
        self.positions.get(i).and_then(|d| d.first()).copied()
    }

    /// Each list non-empty, at most `top_k` long, sorted by descending `p`,
    /// with every `p` in (0, 1] and the total at most 1.
    pub fn validate(&self, n_positions: usize, top_k: usize) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Protocol(m));
        if self.positions.len() != n_positions {
            return bad(format!("{} distributions for {n_positions} masks", self.positions.len()));
        }
        for (i, d) in self.positions.iter().enumerate() {
            if d.is_empty() || d.len() > top_k {
                return bad(format!("position {i}: {} candidates for top_k {top_k}", d.len()));
            }
            if d.iter().any(|t| !(t.p > 0.0 && t.p <= 1.0)) {
                return bad(format!("position {i}: probability outside (0, 1]"));
            }
            if d.windows(2).any(|w| w[0].p < w[1].p) {
                return bad(format!("position {i}: candidates not sorted"));
            }
            if d.iter().map(|t| t.p).sum::<f64>() > 1.0 + 1e-9 {
                return bad(format!("position {i}: probabilities sum above 1"));
            }
        }
        Ok(())
    }
}

/// Sort by descending probability, breaking ties toward the
/// lexicographically smallest token string, and keep the first `k`.
pub fn rank(cands: &mut Vec<TokenProb>, k: usize, vocab: &Vocab) {
    cands.sort_by(|a, b| {
        b.p.total_cmp(&a.p)
            .then_with(|| vocab.token(a.token).cmp(vocab.token(b.token)))
    });
    cands.truncate(k);
}

pub trait FillMaskScorer: Send + Sync {
    fn score(&self, request: &ScoreRequest) -> Result<MaskDistribution, BackendError>;
}

impl<T: FillMaskScorer + ?Sized> FillMaskScorer for Box<T> {
    fn score(&self, request: &ScoreRequest) -> Result<MaskDistribution, BackendError> {
        (**self).score(request)
    }
}

impl<T: FillMaskScorer + ?Sized> FillMaskScorer for std::sync::Arc<T> {
    fn score(&self, request: &ScoreRequest) -> Result<MaskDistribution, BackendError> {
        (**self).score(request)
    }
}
