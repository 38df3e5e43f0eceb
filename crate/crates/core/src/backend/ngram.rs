//! Count-based n-gram fill-mask scorer.
//!
//! The model keeps two count tables over the same histories. The full table
//! counts every token of every training sequence. The masked table counts
//! only the tokens at labelled positions, the ones a masked LM is trained to
//! recover. Mask candidates come from the masked table; known tokens around
//! a mask are scored with the full table.
//!
//! Conditionals are stupid-backoff scores normalized per history. When the
//! last mask has known tokens after it, masks are first filled right to
//! left, each with the token that best explains the tokens after it;
//! otherwise they are filled left to right with the argmax. Each mask is
//! then re-ranked, holding the other masks fixed, until the fill stops
//! changing. The value reported for a candidate is the probability of the
//! whole fill with that candidate in place: every mask and up to
//! `order - 1` known tokens past the last mask, each conditioned on what
//! precedes it. Values at one position therefore sum to at most one.
//!
//! Candidates for a position are the tokens seen after its left context in
//! the masked table, plus the `top_k` most frequent labelled tokens, cut to
//! the best [`POOL`] by left-context probability before joint scoring.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rustc_hash::FxHashMap as HashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{rank, BackendError, FillMaskScorer, MaskDistribution, ScoreRequest, TokenProb};
use crate::tokenizer::{TokenId, Vocab};

const MAGIC: &[u8; 8] = b"FQNNGRAM";
const FORMAT_VERSION: u8 = 1;
const REFINE_PASSES: usize = 4;
/// Candidates kept per position for joint scoring.
pub const POOL: usize = 16;

/// Sentence-start padding. Never a vocabulary id.
pub const BOS: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("no training tokens")]
    EmptyCorpus,
    #[error("invalid n-gram config: {0}")]
    InvalidConfig(String),
    #[error("not an n-gram model file")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u8),
    #[error("model was trained with a different vocabulary")]
    VocabMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramConfig {
    pub order: usize,
    /// Additive smoothing on the unigram (or full-order, without backoff).
    pub alpha: f64,
    /// Stupid-backoff factor; `None` selects full-order additive smoothing.
    pub backoff: Option<f64>,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self {
            order: 4,
            alpha: 1.0,
            backoff: Some(0.4),
        }
    }
}

impl NgramConfig {
    pub fn validate(&self) -> Result<(), NgramError> {
        if self.order == 0 || self.order > 16 {
            return Err(NgramError::InvalidConfig(format!("order {} outside 1..=16", self.order)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(NgramError::InvalidConfig(format!("alpha {} must be positive", self.alpha)));
        }
        if let Some(l) = self.backoff {
            if !(l > 0.0 && l <= 1.0) {
                return Err(NgramError::InvalidConfig(format!("backoff {l} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Ctx {
    total: u64,
    next: HashMap<u32, u64>,
}

type Table = HashMap<Vec<u32>, Ctx>;

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    config: NgramConfig,
    vocab_len: u32,
    vocab_digest: [u8; 32],
    all: Table,
    masked: Table,
}

/// Count all 1..=order grams of every sequence, treating every position as
/// labelled. Histories are padded with [`BOS`]; special tokens are never
/// counted as predictions.
pub fn train_ngram<'a, I>(sequences: I, config: NgramConfig, vocab: &Vocab) -> Result<NgramModel, NgramError>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    train(sequences.into_iter().map(|s| (s, None)), config, vocab)
}

/// Like [`train_ngram`], but only the listed positions of each sequence
/// enter the masked table.
pub fn train_ngram_labeled<'a, I>(sequences: I, config: NgramConfig, vocab: &Vocab) -> Result<NgramModel, NgramError>
where
    I: IntoIterator<Item = (&'a [TokenId], &'a [usize])>,
{
    train(sequences.into_iter().map(|(s, l)| (s, Some(l))), config, vocab)
}

fn train<'a, I>(sequences: I, config: NgramConfig, vocab: &Vocab) -> Result<NgramModel, NgramError>
where
    I: Iterator<Item = (&'a [TokenId], Option<&'a [usize]>)>,
{
    config.validate()?;
    let mut model = NgramModel::empty(config, vocab)?;
    let h = config.order - 1;
    let mut padded: Vec<u32> = Vec::new();
    let mut labelled: Vec<bool> = Vec::new();
    for (seq, labels) in sequences {
        padded.clear();
        padded.extend(std::iter::repeat(BOS).take(h));
        padded.extend(seq.iter().map(|t| t.0));
        labelled.clear();
        match labels {
            None => labelled.resize(seq.len(), true),
            Some(ls) => {
                labelled.resize(seq.len(), false);
                for &l in ls.iter().filter(|&&l| l < seq.len()) {
                    labelled[l] = true;
                }
            }
        }
        for i in h..padded.len() {
            let w = padded[i];
            if vocab.is_special(TokenId(w)) {
                continue;
            }
            for k in 0..=h {
                let key = &padded[i - k..i];
                bump(&mut model.all, key, w);
                if labelled[i - h] {
                    bump(&mut model.masked, key, w);
                }
            }
        }
    }
    if model.all.is_empty() || model.masked.is_empty() {
        return Err(NgramError::EmptyCorpus);
    }
    Ok(model)
}

fn bump(table: &mut Table, key: &[u32], w: u32) {
    let ctx = match table.get_mut(key) {
        Some(c) => c,
        None => table.entry(key.to_vec()).or_default(),
    };
    ctx.total += 1;
    *ctx.next.entry(w).or_default() += 1;
}

fn key_of(history: &[TokenId]) -> Vec<u32> {
    history.iter().map(|t| t.0).collect()
}

fn write_table(out: &mut impl Write, table: &Table) -> Result<(), NgramError> {
    let mut keys: Vec<&Vec<u32>> = table.keys().collect();
    keys.sort();
    out.write_u64::<LittleEndian>(keys.len() as u64)?;
    for key in keys {
        out.write_u32::<LittleEndian>(key.len() as u32)?;
        for &t in key {
            out.write_u32::<LittleEndian>(t)?;
        }
        let mut entries: Vec<(&u32, &u64)> = table[key].next.iter().collect();
        entries.sort();
        out.write_u32::<LittleEndian>(entries.len() as u32)?;
        for (t, c) in entries {
            out.write_u32::<LittleEndian>(*t)?;
            out.write_u64::<LittleEndian>(*c)?;
        }
    }
    Ok(())
}

fn read_table(input: &mut impl Read, order: usize) -> Result<Table, NgramError> {
    let n = input.read_u64::<LittleEndian>()?;
    let mut table = HashMap::default();
    for _ in 0..n {
        let len = input.read_u32::<LittleEndian>()? as usize;
        if len >= order {
            return Err(NgramError::InvalidConfig(format!("context of length {len} in order-{order} model")));
        }
        let key = (0..len)
            .map(|_| input.read_u32::<LittleEndian>())
            .collect::<Result<Vec<_>, _>>()?;
        let m = input.read_u32::<LittleEndian>()?;
        let mut ctx = Ctx::default();
        for _ in 0..m {
            let t = input.read_u32::<LittleEndian>()?;
            let c = input.read_u64::<LittleEndian>()?;
            ctx.total += c;
            ctx.next.insert(t, c);
        }
        table.insert(key, ctx);
    }
    Ok(table)
}

impl NgramModel {
    /// A model with no counts: every position scores uniformly.
    pub fn empty(config: NgramConfig, vocab: &Vocab) -> Result<Self, NgramError> {
        config.validate()?;
        Ok(Self {
            config,
            vocab_len: vocab.len() as u32,
            vocab_digest: vocab.digest(),
            all: HashMap::default(),
            masked: HashMap::default(),
        })
    }

    pub fn config(&self) -> NgramConfig {
        self.config
    }

    pub fn vocab_digest(&self) -> [u8; 32] {
        self.vocab_digest
    }

    /// Count of `history` followed by `token` in the full table.
    pub fn count(&self, history: &[TokenId], token: TokenId) -> u64 {
        count_in(&self.all, &key_of(history), token.0)
    }

    /// Count of `history` followed by a labelled `token`.
    pub fn masked_count(&self, history: &[TokenId], token: TokenId) -> u64 {
        count_in(&self.masked, &key_of(history), token.0)
    }

    pub fn context_count(&self, history: &[TokenId]) -> u64 {
        self.all.get(key_of(history).as_slice()).map_or(0, |c| c.total)
    }

    pub fn masked_context_count(&self, history: &[TokenId]) -> u64 {
        self.masked.get(key_of(history).as_slice()).map_or(0, |c| c.total)
    }

    /// Layout, little-endian: magic, version byte, order u32, alpha f64,
    /// backoff flag u8 and factor f64, vocab length u32, vocab digest, then
    /// the full table and the masked table. A table is a u64 context count
    /// followed by sorted contexts, each a u32 length, the ids, a u32 entry
    /// count and sorted (u32 token, u64 count) pairs.
    pub fn write_to(&self, out: &mut impl Write) -> Result<(), NgramError> {
        out.write_all(MAGIC)?;
        out.write_u8(FORMAT_VERSION)?;
        out.write_u32::<LittleEndian>(self.config.order as u32)?;
        out.write_f64::<LittleEndian>(self.config.alpha)?;
        out.write_u8(self.config.backoff.is_some() as u8)?;
        out.write_f64::<LittleEndian>(self.config.backoff.unwrap_or(0.0))?;
        out.write_u32::<LittleEndian>(self.vocab_len)?;
        out.write_all(&self.vocab_digest)?;
        write_table(out, &self.all)?;
        write_table(out, &self.masked)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self, NgramError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NgramError::BadMagic);
        }
        let version = input.read_u8()?;
        if version != FORMAT_VERSION {
            return Err(NgramError::UnsupportedVersion(version));
        }
        let order = input.read_u32::<LittleEndian>()? as usize;
        let alpha = input.read_f64::<LittleEndian>()?;
        let has_backoff = input.read_u8()? == 1;
        let lambda = input.read_f64::<LittleEndian>()?;
        let config = NgramConfig {
            order,
            alpha,
            backoff: has_backoff.then_some(lambda),
        };
        config.validate()?;
        let vocab_len = input.read_u32::<LittleEndian>()?;
        let mut vocab_digest = [0u8; 32];
        input.read_exact(&mut vocab_digest)?;
        let all = read_table(input, order)?;
        let masked = read_table(input, order)?;
        Ok(Self {
            config,
            vocab_len,
            vocab_digest,
            all,
            masked,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NgramError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NgramError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input)
    }
}

fn count_in(table: &Table, history: &[u32], token: u32) -> u64 {
    table
        .get(history)
        .and_then(|c| c.next.get(&token))
        .copied()
        .unwrap_or(0)
}

fn predecessors(table: &Table, vocab: &Vocab) -> HashMap<u32, Vec<u32>> {
    let mut out: HashMap<u32, Vec<u32>> = HashMap::default();
    for (ctx, c) in table {
        if let [a] = ctx[..] {
            if a == BOS || vocab.is_special(TokenId(a)) {
                continue;
            }
            for &b in c.next.keys() {
                out.entry(b).or_default().push(a);
            }
        }
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Which {
    All,
    Masked,
}

/// Normalizers and orderings derived from one table.
#[derive(Default)]
struct Derived {
    z: HashMap<Vec<u32>, f64>,
    unigram_total: u64,
    /// Candidates by descending unigram score, then token string.
    unigram_order: Vec<u32>,
}

/// [`NgramModel`] bound to its vocabulary, with normalizers precomputed.
pub struct NgramScorer {
    model: NgramModel,
    vocab: Arc<Vocab>,
    candidates: Vec<u32>,
    /// Candidates by token string.
    lex_order: Vec<u32>,
    all: Derived,
    masked: Derived,
    /// Tokens seen directly before each token, per table.
    before_all: HashMap<u32, Vec<u32>>,
    before_masked: HashMap<u32, Vec<u32>>,
}

impl NgramScorer {
    pub fn new(model: NgramModel, vocab: Arc<Vocab>) -> Result<Self, NgramError> {
        if model.vocab_digest != vocab.digest() || model.vocab_len as usize != vocab.len() {
            return Err(NgramError::VocabMismatch);
        }
        let candidates: Vec<u32> = vocab.candidates().iter().map(|t| t.0).collect();
        let mut lex_order = candidates.clone();
        lex_order.sort_by(|a, b| vocab.token(TokenId(*a)).cmp(vocab.token(TokenId(*b))));
        let mut scorer = Self {
            model,
            vocab,
            candidates,
            lex_order,
            all: Derived::default(),
            masked: Derived::default(),
            before_all: HashMap::default(),
            before_masked: HashMap::default(),
        };
        scorer.all = scorer.derive(Which::All);
        scorer.masked = scorer.derive(Which::Masked);
        scorer.before_all = predecessors(&scorer.model.all, &scorer.vocab);
        scorer.before_masked = predecessors(&scorer.model.masked, &scorer.vocab);
        Ok(scorer)
    }

    fn derive(&mut self, which: Which) -> Derived {
        let table = self.table(which);
        let unigram_total = table.get(&[][..]).map_or(0, |c| c.total);
        // Install the total first; unigram scores and normalizers read it.
        *self.derived_mut(which) = Derived {
            unigram_total,
            ..Default::default()
        };
        let mut uni = self.lex_order.clone();
        uni.sort_by(|a, b| self.s0(which, *b).total_cmp(&self.s0(which, *a)));
        self.derived_mut(which).unigram_order = uni;
        if self.model.config.backoff.is_some() {
            let mut keys: Vec<Vec<u32>> = self.table(which).keys().filter(|k| !k.is_empty()).cloned().collect();
            keys.sort_by_key(|k| k.len());
            for k in keys {
                let z = self.compute_z(which, &k);
                self.derived_mut(which).z.insert(k, z);
            }
        }
        std::mem::take(self.derived_mut(which))
    }

    fn derived_mut(&mut self, which: Which) -> &mut Derived {
        match which {
            Which::All => &mut self.all,
            Which::Masked => &mut self.masked,
        }
    }

    fn derived(&self, which: Which) -> &Derived {
        match which {
            Which::All => &self.all,
            Which::Masked => &self.masked,
        }
    }

    fn table(&self, which: Which) -> &Table {
        match which {
            Which::All => &self.model.all,
            Which::Masked => &self.model.masked,
        }
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }

    fn lambda(&self) -> f64 {
        self.model.config.backoff.unwrap_or(1.0)
    }

    fn s0(&self, which: Which, w: u32) -> f64 {
        let a = self.model.config.alpha;
        let c = count_in(self.table(which), &[], w) as f64;
        (c + a) / (self.derived(which).unigram_total as f64 + a * self.candidates.len() as f64)
    }

    /// Unnormalized stupid-backoff score of `w` after history `h`.
    fn stupid(&self, which: Which, h: &[u32], w: u32) -> f64 {
        let lambda = self.lambda();
        let table = self.table(which);
        let mut factor = 1.0;
        for k in (1..=h.len()).rev() {
            if let Some(c) = table.get(&h[h.len() - k..]) {
                if let Some(&cw) = c.next.get(&w) {
                    return factor * cw as f64 / c.total as f64;
                }
            }
            factor *= lambda;
        }
        factor * self.s0(which, w)
    }

    /// Sum of stupid-backoff scores over all candidates after `h`.
    fn z_of(&self, which: Which, h: &[u32]) -> f64 {
        if h.is_empty() {
            return 1.0;
        }
        match self.derived(which).z.get(h) {
            Some(&z) => z,
            None => self.lambda() * self.z_of(which, &h[1..]),
        }
    }

    fn compute_z(&self, which: Which, h: &[u32]) -> f64 {
        let lower = &h[1..];
        let zl = self.z_of(which, lower);
        match self.table(which).get(h) {
            Some(c) if c.total > 0 => {
                let seen: f64 = c.next.keys().map(|&v| self.stupid(which, lower, v)).sum();
                1.0 + self.lambda() * (zl - seen)
            }
            _ => self.lambda() * zl,
        }
    }

    fn prob_in(&self, which: Which, h: &[u32], w: u32) -> f64 {
        let n = self.model.config.order - 1;
        let h = &h[h.len().saturating_sub(n)..];
        match self.model.config.backoff {
            Some(_) => self.stupid(which, h, w) / self.z_of(which, h),
            None => {
                let a = self.model.config.alpha;
                let (c, total) = self
                    .table(which)
                    .get(h)
                    .map_or((0, 0), |ctx| (ctx.next.get(&w).copied().unwrap_or(0), ctx.total));
                (c as f64 + a) / (total as f64 + a * self.candidates.len() as f64)
            }
        }
    }

    /// P(w | last `order - 1` tokens of `h`) under the full table.
    pub fn prob(&self, h: &[u32], w: u32) -> f64 {
        self.prob_in(Which::All, h, w)
    }

    /// P(w | last `order - 1` tokens of `h`) under the masked table.
    pub fn masked_prob(&self, h: &[u32], w: u32) -> f64 {
        self.prob_in(Which::Masked, h, w)
    }

    fn extend_seen(&self, pool: &mut Vec<u32>, h: &[u32]) {
        for j in 1..=h.len() {
            if let Some(c) = self.model.masked.get(&h[h.len() - j..]) {
                pool.extend(c.next.keys());
            }
        }
    }

    fn left_pool(&self, h: &[u32], k: usize) -> Vec<u32> {
        let mut pool = Vec::new();
        match self.model.config.backoff {
            Some(_) => {
                self.extend_seen(&mut pool, h);
                pool.extend(self.masked.unigram_order.iter().take(k));
            }
            None => {
                if let Some(c) = self.model.masked.get(h) {
                    pool.extend(c.next.keys());
                }
                pool.extend(self.lex_order.iter().take(k));
            }
        }
        pool
    }

    fn factor(&self, seq: &[u32], masked: &[bool], q: usize) -> f64 {
        let n = self.model.config.order - 1;
        let which = if masked[q] { Which::Masked } else { Which::All };
        self.prob_in(which, &seq[q - n..q], seq[q])
    }

    /// Ranked candidates for mask `pos` of `seq`. `known[i]` says whether
    /// `seq[i]` holds a real or filled token; `masked[i]` whether position
    /// `i` is a mask. `seq` carries `order - 1` tokens of padding.
    fn rank_at(&self, seq: &[u32], known: &[bool], masked: &[bool], pos: usize, k: usize) -> Vec<TokenProb> {
        let n = self.model.config.order - 1;
        let h = &seq[pos - n..pos];
        let mut end = pos;
        let mut plain = 0;
        while end + 1 < seq.len() && known[end + 1] && plain < n {
            end += 1;
            plain = if masked[end] { 0 } else { plain + 1 };
        }
        let mut start = pos;
        while start > 0 && masked[start - 1] {
            start -= 1;
        }
        let before: f64 = (start..pos).map(|q| self.factor(seq, masked, q)).product();
        if end == pos {
            return self.rank_pool(self.left_pool(h, k), k, |w| before * self.masked_prob(h, w));
        }
        let mut pool: Vec<TokenProb> = self.rank_pool(self.left_pool(h, k), POOL.max(k), |w| self.masked_prob(h, w));
        let right = (end - pos).min(n);
        let tail: f64 = before * (pos + right + 1..=end).map(|q| self.factor(seq, masked, q)).product::<f64>();
        let mut window: Vec<u32> = seq[pos - n..=pos + right].to_vec();
        for t in &mut pool {
            window[n] = t.token.0;
            for j in 1..=right {
                let which = if masked[pos + j] { Which::Masked } else { Which::All };
                t.p *= self.prob_in(which, &window[j..n + j], window[n + j]);
            }
            t.p *= tail;
        }
        rank(&mut pool, k, &self.vocab);
        pool
    }

    /// Ranked candidates for mask `pos` given only the tokens after it:
    /// P(w) times P(following tokens | w), over tokens seen before the next one.
    fn rank_backward(&self, seq: &[u32], masked: &[bool], pos: usize, k: usize) -> Vec<TokenProb> {
        let n = self.model.config.order - 1;
        let right = (seq.len() - 1 - pos).min(n);
        if right == 0 {
            let h = &seq[pos - n..pos];
            return self.rank_pool(self.left_pool(h, k), k, |w| self.masked_prob(h, w));
        }
        let before = if masked[pos + 1] { &self.before_masked } else { &self.before_all };
        let mut pool: Vec<u32> = before.get(&seq[pos + 1]).cloned().unwrap_or_default();
        pool.extend(self.masked.unigram_order.iter().take(k));
        let mut window: Vec<u32> = seq[pos..=pos + right].to_vec();
        self.rank_pool(pool, k, |w| {
            window[0] = w;
            let mut p = self.masked_prob(&[], w);
            for j in 1..=right {
                let which = if masked[pos + j] { Which::Masked } else { Which::All };
                p *= self.prob_in(which, &window[..j], window[j]);
            }
            p
        })
    }

    fn rank_pool(&self, mut pool: Vec<u32>, k: usize, mut score: impl FnMut(u32) -> f64) -> Vec<TokenProb> {
        pool.sort_unstable();
        pool.dedup();
        let mut out: Vec<TokenProb> = pool
            .into_iter()
            .filter(|w| !self.vocab.is_special(TokenId(*w)))
            .map(|w| TokenProb {
                token: TokenId(w),
                p: score(w),
            })
            .collect();
        rank(&mut out, k, &self.vocab);
        out
    }
}

impl FillMaskScorer for NgramScorer {
    fn score(&self, request: &ScoreRequest) -> Result<MaskDistribution, BackendError> {
        request.validate(&self.vocab)?;
        let n = self.model.config.order - 1;
        let mut seq: Vec<u32> = std::iter::repeat(BOS).take(n).chain(request.tokens.iter().map(|t| t.0)).collect();
        let mut masked = vec![false; seq.len()];
        let masks: Vec<usize> = request.mask_positions.iter().map(|p| p + n).collect();
        for &m in &masks {
            masked[m] = true;
        }
        let mut known: Vec<bool> = masked.iter().map(|m| !m).collect();
        let mut positions = vec![Vec::new(); masks.len()];
        if masks.last().is_some_and(|&m| m + 1 < seq.len()) {
            for (i, &pos) in masks.iter().enumerate().rev() {
                let dist = self.rank_backward(&seq, &masked, pos, request.top_k);
                seq[pos] = dist[0].token.0;
                known[pos] = true;
                positions[i] = dist;
            }
        } else {
            for (i, &pos) in masks.iter().enumerate() {
                let dist = self.rank_at(&seq, &known, &masked, pos, request.top_k);
                seq[pos] = dist[0].token.0;
                known[pos] = true;
                positions[i] = dist;
            }
        }
        for _ in 0..REFINE_PASSES {
            let mut changed = false;
            for (i, &pos) in masks.iter().enumerate() {
                let dist = self.rank_at(&seq, &known, &masked, pos, request.top_k);
                if dist[0].token.0 != seq[pos] {
                    seq[pos] = dist[0].token.0;
                    changed = true;
                }
                positions[i] = dist;
            }
            if !changed {
                break;
            }
        }
        Ok(MaskDistribution { positions })
    }
}
