//! Deterministic backend driven by a closure or a JSON fixture.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::remote::WireTokenProb;
use super::{rank, BackendError, FillMaskScorer, MaskDistribution, ScoreRequest, TokenProb};
use crate::tokenizer::Vocab;

type ScriptFn = dyn Fn(&ScoreRequest) -> Result<MaskDistribution, BackendError> + Send + Sync;

pub struct ScriptedBackend {
    f: Box<ScriptFn>,
}

impl ScriptedBackend {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&ScoreRequest) -> Result<MaskDistribution, BackendError> + Send + Sync + 'static,
    {
        Self { f: Box::new(f) }
    }

    pub fn from_fixture(fixture: ScriptFixture, vocab: Arc<Vocab>) -> Result<Self, BackendError> {
        let convert = |list: &[WireTokenProb]| -> Result<Vec<TokenProb>, BackendError> {
            list.iter()
                .map(|t| {
                    vocab
                        .id(&t.token)
                        .map(|token| TokenProb { token, p: t.p })
                        .ok_or_else(|| BackendError::VocabMismatch(format!("fixture token {:?}", t.token)))
                })
                .collect()
        };
        let default = convert(&fixture.default)?;
        let mut by_length = BTreeMap::new();
        for (len, lists) in &fixture.by_length {
            let lists = lists.iter().map(|l| convert(l)).collect::<Result<Vec<_>, _>>()?;
            if lists.is_empty() {
                return Err(BackendError::InvalidRequest(format!("fixture length {len} has no positions")));
            }
            by_length.insert(*len, lists);
        }
        if default.is_empty() && by_length.is_empty() {
            return Err(BackendError::InvalidRequest("fixture has no distributions".into()));
        }
        Ok(Self::new(move |req| {
            req.validate(&vocab)?;
            let n = req.mask_positions.len();
            let positions = (0..n)
                .map(|i| {
                    let mut d = match by_length.get(&n) {
                        Some(lists) => lists[i.min(lists.len() - 1)].clone(),
                        None => default.clone(),
                    };
                    rank(&mut d, req.top_k, &vocab);
                    d
                })
                .collect();
            let d = MaskDistribution { positions };
            d.validate(n, req.top_k)?;
            Ok(d)
        }))
    }

    pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocab>) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let fixture: ScriptFixture =
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidRequest(format!("fixture: {e}")))?;
        Self::from_fixture(fixture, vocab)
    }
}

/// Canned distributions keyed by the number of masks in a request. A
/// request whose mask count is absent gets `default` at every position.
/// When a keyed entry lists fewer positions than masks, its last entry
/// repeats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptFixture {
    pub default: Vec<WireTokenProb>,
    pub by_length: BTreeMap<usize, Vec<Vec<WireTokenProb>>>,
}

impl FillMaskScorer for ScriptedBackend {
    fn score(&self, request: &ScoreRequest) -> Result<MaskDistribution, BackendError> {
        (self.f)(request)
    }
}
