//! WordPiece subword tokenization over a fixed vocabulary.
//!
//! Text is first split into pre-tokens: runs of identifier characters, and
//! every other non-whitespace character on its own. Each pre-token is then
//! decomposed greedily into the longest vocabulary prefixes, with non-initial
//! pieces carrying the continuation prefix. A pre-token with no complete
//! decomposition becomes the unknown token. Case is preserved.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexer::is_ident_char;

/// Pre-tokens longer than this (in chars) map straight to the unknown token.
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary line {line}: empty token")]
    EmptyToken { line: usize },
    #[error("vocabulary line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("vocabulary lacks required special token {0:?}")]
    MissingSpecial(String),
    #[error("reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("sequence contains the unknown token at position {0}")]
    UnknownTokenPresent(usize),
    #[error("sequence contains special token {token:?} at position {position}")]
    SpecialTokenPresent { position: usize, token: String },
}

/// Names of the special tokens and the continuation prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub continuation_prefix: String,
    pub mask_token: String,
    pub unknown_token: String,
    pub padding_token: String,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            continuation_prefix: "##".into(),
            mask_token: "[MASK]".into(),
            unknown_token: "[UNK]".into(),
            padding_token: "[PAD]".into(),
        }
    }
}

/// Immutable token table. Line number in the vocabulary file is the id.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mask: TokenId,
    unknown: TokenId,
    padding: Option<TokenId>,
    prefix: String,
    candidates: Vec<TokenId>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I, config: &VocabConfig) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (line, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok == &config.continuation_prefix {
                return Err(VocabError::EmptyToken { line });
            }
            if index.insert(tok.clone(), TokenId(line as u32)).is_some() {
                return Err(VocabError::DuplicateToken {
                    line,
                    token: tok.clone(),
                });
            }
        }
        let need = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| VocabError::MissingSpecial(name.to_string()))
        };
        let mask = need(&config.mask_token)?;
        let unknown = need(&config.unknown_token)?;
        let padding = index.get(&config.padding_token).copied();

        let mut vocab = Self {
            tokens,
            index,
            mask,
            unknown,
            padding,
            prefix: config.continuation_prefix.clone(),
            candidates: Vec::new(),
        };
        vocab.candidates = (0..vocab.tokens.len() as u32)
            .map(TokenId)
            .filter(|&id| !vocab.is_special(id))
            .collect();
        Ok(vocab)
    }

    /// Parse the one-token-per-line format. A trailing newline is not a token.
    pub fn parse(text: &str, config: &VocabConfig) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')), config)
    }

    pub fn load(path: impl AsRef<Path>, config: &VocabConfig) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, config)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.0 as usize]
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id.0 as usize) < self.tokens.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask
    }

    pub fn unknown_id(&self) -> TokenId {
        self.unknown
    }

    pub fn padding_id(&self) -> Option<TokenId> {
        self.padding
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.prefix
    }

    /// Mask, unknown, padding, and any bracketed marker such as `[CLS]`.
    pub fn is_special(&self, id: TokenId) -> bool {
        if id == self.mask || id == self.unknown || Some(id) == self.padding {
            return true;
        }
        let t = self.token(id);
        t.len() > 2
            && t.starts_with('[')
            && t.ends_with(']')
            && t[1..t.len() - 1].chars().all(|c| c.is_alphanumeric() || c == '_')
    }

    /// Tokens a scorer may predict: every non-special token, in id order.
    pub fn candidates(&self) -> &[TokenId] {
        &self.candidates
    }

    /// SHA-256 over the newline-joined token list.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn to_strings(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }
}

/// A tokenized string. `spans` are byte ranges into the source text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub spans: Option<Vec<(usize, usize)>>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        Self { ids, spans: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Split into pre-tokens: identifier runs and single other characters.
pub fn pre_tokenize(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_ident_char(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push((s, i));
        }
        if !c.is_whitespace() {
            out.push((i, i + c.len_utf8()));
        }
    }
    if let Some(s) = word_start {
        out.push((s, text.len()));
    }
    out
}

fn wordpiece(word: &str, vocab: &Vocab, out: &mut Vec<(TokenId, usize, usize)>, base: usize) {
    if word.chars().count() > MAX_CHARS_PER_WORD {
        out.push((vocab.unknown, base, base + word.len()));
        return;
    }
    let mark = out.len();
    let mut start = 0;
    let mut piece = String::new();
    while start < word.len() {
        let mut end = word.len();
        let mut found = None;
        while end > start {
            piece.clear();
            if start > 0 {
                piece.push_str(&vocab.prefix);
            }
            piece.push_str(&word[start..end]);
            if let Some(id) = vocab.id(&piece) {
                found = Some(id);
                break;
            }
            end = word[..end]
                .char_indices()
                .next_back()
                .map(|(i, _)| i)
                .unwrap_or(start);
        }
        match found {
            Some(id) => {
                out.push((id, base + start, base + end));
                start = end;
            }
            None => {
                out.truncate(mark);
                out.push((vocab.unknown, base, base + word.len()));
                return;
            }
        }
    }
}

/// Greedy longest-match-first WordPiece tokenization.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut pieces = Vec::new();
    for (s, e) in pre_tokenize(text) {
        wordpiece(&text[s..e], vocab, &mut pieces, s);
    }
    let (ids, spans) = pieces.into_iter().map(|(id, s, e)| (id, (s, e))).unzip();
    TokenSequence {
        ids,
        spans: Some(spans),
    }
}

/// Token ids only, for callers that do not need spans.
pub fn tokenize_ids(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    tokenize(text, vocab).ids
}

fn word_like_end(s: &str) -> bool {
    s.chars().next_back().is_some_and(is_ident_char)
}

fn word_like_start(s: &str) -> bool {
    s.chars().next().is_some_and(is_ident_char)
}

/// Join tokens back into text, stripping continuation prefixes. A single
/// space separates two adjacent word-like tokens when the second one starts
/// a new word; nothing else gets whitespace.
pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> Result<String, DecodeError> {
    let mut out = String::new();
    let mut prev_word = false;
    for (position, &id) in ids.iter().enumerate() {
        if id == vocab.unknown {
            return Err(DecodeError::UnknownTokenPresent(position));
        }
        if vocab.is_special(id) {
            return Err(DecodeError::SpecialTokenPresent {
                position,
                token: vocab.token(id).to_string(),
            });
        }
        let tok = vocab.token(id);
        match tok.strip_prefix(vocab.prefix.as_str()) {
            Some(rest) if !rest.is_empty() => {
                out.push_str(rest);
                prev_word = word_like_end(rest);
            }
            _ => {
                if prev_word && word_like_start(tok) {
                    out.push(' ');
                }
                out.push_str(tok);
                prev_word = word_like_end(tok);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut toks = vec!["[PAD]", "[UNK]", "[MASK]"];
        toks.extend_from_slice(extra);
        Vocab::from_tokens(toks, &VocabConfig::default()).unwrap()
    }

    fn strs(seq: &TokenSequence, v: &Vocab) -> Vec<String> {
        v.to_strings(&seq.ids)
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["read", "re", "##ad", "##Line", "##L"]);
        assert_eq!(strs(&tokenize("readLine", &v), &v), vec!["read", "##Line"]);
    }

    #[test]
    fn dotted_name_pieces() {
        let v = vocab(&["org", ".", "jo", "##da", "time"]);
        let seq = tokenize("org.joda.time", &v);
        assert_eq!(strs(&seq, &v), vec!["org", ".", "jo", "##da", ".", "time"]);
        assert_eq!(
            seq.spans.unwrap(),
            vec![(0, 3), (3, 4), (4, 6), (6, 8), (8, 9), (9, 13)]
        );
        assert_eq!(detokenize(&tokenize_ids("org.joda.time", &v), &v).unwrap(), "org.joda.time");
    }

    #[test]
    fn empty_input() {
        let v = vocab(&[]);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(detokenize(&[], &v).unwrap(), "");
    }

    #[test]
    fn undecomposable_word_is_unknown() {
        let v = vocab(&["ab"]);
        let seq = tokenize("abc ab", &v);
        assert_eq!(strs(&seq, &v), vec!["[UNK]", "ab"]);
        assert_eq!(
            detokenize(&seq.ids, &v),
            Err(DecodeError::UnknownTokenPresent(0))
        );
    }

    #[test]
    fn mask_is_not_decodable() {
        let v = vocab(&["a"]);
        assert!(matches!(
            detokenize(&[v.mask_id()], &v),
            Err(DecodeError::SpecialTokenPresent { .. })
        ));
    }

    #[test]
    fn detokenize_spaces_words_only() {
        let v = vocab(&["final", "int", "x", "(", ")", "=", "##y"]);
        let ids: Vec<_> = ["final", "int", "x", "##y", "=", "(", ")"]
            .iter()
            .map(|t| v.id(t).unwrap())
            .collect();
        assert_eq!(detokenize(&ids, &v).unwrap(), "final int xy=()");
    }

    #[test]
    fn vocab_rejects_duplicates_and_missing_specials() {
        let cfg = VocabConfig::default();
        assert!(matches!(
            Vocab::from_tokens(["[UNK]", "[MASK]", "a", "a"], &cfg),
            Err(VocabError::DuplicateToken { line: 3, .. })
        ));
        assert!(matches!(
            Vocab::from_tokens(["[UNK]", "a"], &cfg),
            Err(VocabError::MissingSpecial(_))
        ));
        assert!(matches!(
            Vocab::from_tokens(["[UNK]", "[MASK]", ""], &cfg),
            Err(VocabError::EmptyToken { line: 2 })
        ));
    }

    #[test]
    fn candidates_exclude_specials() {
        let v = vocab(&["[CLS]", "a", "[", "]"]);
        let c: Vec<_> = v.candidates().iter().map(|&i| v.token(i)).collect();
        assert_eq!(c, vec!["a", "[", "]"]);
    }

    fn char_vocab() -> Vocab {
        let mut toks: Vec<String> = vec!["[PAD]".into(), "[UNK]".into(), "[MASK]".into(), ".".into()];
        let alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_$";
        for c in alphabet.chars() {
            toks.push(c.to_string());
            toks.push(format!("##{c}"));
        }
        for w in ["org", "java", "util", "time", "##Time", "Local", "##er", "read"] {
            toks.push(w.into());
        }
        Vocab::from_tokens(toks, &VocabConfig::default()).unwrap()
    }

    proptest! {
        #[test]
        fn identifier_round_trip(s in "[A-Za-z_$][A-Za-z0-9_$]{0,12}(\\.[A-Za-z_$][A-Za-z0-9_$]{0,12}){0,4}") {
            let v = char_vocab();
            let ids = tokenize_ids(&s, &v);
            prop_assert!(!ids.contains(&v.unknown_id()));
            prop_assert_eq!(detokenize(&ids, &v).unwrap(), s);
        }

        #[test]
        fn concatenation_never_merges_pre_tokens(a in "[ -~]{0,20}", b in "[ -~]{0,20}") {
            let v = char_vocab();
            let joined = tokenize_ids(&format!("{a} {b}"), &v);
            let left = tokenize_ids(&a, &v);
            let right = tokenize_ids(&b, &v);
            prop_assert!(joined.len() >= left.len().max(right.len()));
            let mut parts = left;
            parts.extend(right);
            prop_assert_eq!(joined, parts);
        }

        #[test]
        fn spans_are_monotone(s in "\\PC{0,40}") {
            let v = char_vocab();
            let seq = tokenize(&s, &v);
            let spans = seq.spans.unwrap();
            prop_assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
            prop_assert!(spans.iter().all(|&(a, b)| a < b && b <= s.len()));
        }
    }
}
