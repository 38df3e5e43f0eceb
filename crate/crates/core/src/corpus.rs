//! Source units, semicolon line splitting, and FQN-annotated corpora.
//!
//! A corpus record carries the original code text plus annotations that mark
//! where a simple name (or a receiver variable) stands for a fully-qualified
//! name. The annotated form of the code is never stored; it is rendered on
//! demand by substituting annotations back into the original text.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{self, DetectConfig, LexedLine};
use crate::lexer::{is_ident_char, is_ident_start, LexKind};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record {id:?}: {reason}")]
    MalformedRecord { id: String, reason: String },
    #[error("record {id:?}: span ({start}, {end}) out of bounds for text of {len} bytes")]
    SpanOutOfBounds {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("record {id:?}: annotations ({a_start}, {a_end}) and ({b_start}, {b_end}) overlap")]
    OverlapError {
        id: String,
        a_start: usize,
        a_end: usize,
        b_start: usize,
        b_end: usize,
    },
    #[error("corpus line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(id: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRecord {
        id: id.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceUnit {
    pub id: String,
    pub raw_text: String,
    pub library: String,
}

impl SourceUnit {
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>, library: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            raw_text: raw_text.into(),
            library: library.into(),
        }
    }
}

/// One semicolon-delimited code line. `span` is the byte range of `text`
/// within the unit's raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeLine {
    pub index: usize,
    pub text: String,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    /// A simple type name whose package prefix is missing from the code.
    #[serde(rename = "type")]
    TypeName,
    /// A receiver variable standing for its declared type.
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FqnAnnotation {
    pub line_index: usize,
    /// Byte range within the line text.
    pub span: (usize, usize),
    pub surface: String,
    pub fqn: String,
    pub kind: AnnotationKind,
    inserted: String,
}

impl FqnAnnotation {
    /// Text that the annotated rendering adds at this site: the package
    /// prefix with its trailing dot for a type name (empty when the code
    /// already spells it out), the whole FQN for a receiver.
    pub fn inserted_text(&self) -> &str {
        &self.inserted
    }

    pub fn simple_name(&self) -> &str {
        self.fqn.rsplit('.').next().unwrap_or(&self.fqn)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedUnit {
    pub unit: SourceUnit,
    pub lines: Vec<CodeLine>,
    /// Sorted by (line, start); non-overlapping.
    pub annotations: Vec<FqnAnnotation>,
}

impl AnnotatedUnit {
    /// A unit with no known FQNs, as partial code arrives at inference time.
    pub fn unannotated(unit: SourceUnit) -> Self {
        let lines = split_lines(&unit.raw_text);
        Self {
            unit,
            lines,
            annotations: Vec::new(),
        }
    }

    pub fn line_annotations(&self, line: usize) -> impl Iterator<Item = (usize, &FqnAnnotation)> {
        self.annotations
            .iter()
            .enumerate()
            .filter(move |(_, a)| a.line_index == line)
    }

    pub fn has_annotations(&self, line: usize) -> bool {
        self.annotations.iter().any(|a| a.line_index == line)
    }

    /// Line text with every annotation substituted.
    pub fn render_annotated_line(&self, line: usize) -> String {
        let text = &self.lines[line].text;
        let mut out = String::with_capacity(text.len() * 2);
        let mut cursor = 0;
        for (_, a) in self.line_annotations(line) {
            match a.kind {
                AnnotationKind::TypeName => {
                    out.push_str(&text[cursor..a.span.0]);
                    out.push_str(&a.inserted);
                    cursor = a.span.0;
                }
                AnnotationKind::Receiver => {
                    out.push_str(&text[cursor..a.span.0]);
                    out.push_str(&a.inserted);
                    cursor = a.span.1;
                }
            }
        }
        out.push_str(&text[cursor..]);
        out
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord {
            id: self.unit.id.clone(),
            library: self.unit.library.clone(),
            text: self.unit.raw_text.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| {
                    let base = self.lines[a.line_index].span.0;
                    RecordAnnotation {
                        start: base + a.span.0,
                        end: base + a.span.1,
                        fqn: a.fqn.clone(),
                        kind: a.kind,
                    }
                })
                .collect(),
        }
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub library: String,
    pub text: String,
    #[serde(default)]
    pub annotations: Vec<RecordAnnotation>,
}

/// Byte offsets into the record text, end-exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordAnnotation {
    pub start: usize,
    pub end: usize,
    pub fqn: String,
    pub kind: AnnotationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitWarningKind {
    UnterminatedString,
    UnterminatedChar,
    UnterminatedTextBlock,
    UnterminatedComment,
}

/// Literal or comment left open at end of input; `offset` is where it began.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitWarning {
    pub kind: SplitWarningKind,
    pub offset: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SplitOutcome {
    pub lines: Vec<CodeLine>,
    pub warnings: Vec<SplitWarning>,
}

pub fn split_lines(raw_text: &str) -> Vec<CodeLine> {
    split_lines_reporting(raw_text).lines
}

/// Split code on semicolons that sit outside literals and comments and at
/// parenthesis depth 0. Lines are trimmed; empty fragments are dropped.
pub fn split_lines_reporting(raw_text: &str) -> SplitOutcome {
    #[derive(Clone, Copy)]
    enum State {
        Code,
        LineComment,
        BlockComment(usize),
        Str(usize),
        Char(usize),
        TextBlock(usize),
    }

    let bytes = raw_text.as_bytes();
    let mut outcome = SplitOutcome::default();
    let mut state = State::Code;
    let mut depth = 0usize;
    let mut frag_start = 0usize;
    let mut i = 0usize;

    let push = |start: usize, end: usize, lines: &mut Vec<CodeLine>| {
        let frag = &raw_text[start..end];
        let trimmed = frag.trim();
        if trimmed.is_empty() {
            return;
        }
        let lead = frag.len() - frag.trim_start().len();
        let s = start + lead;
        lines.push(CodeLine {
            index: lines.len(),
            text: trimmed.to_string(),
            span: (s, s + trimmed.len()),
        });
    };

    while i < bytes.len() {
        let b = bytes[i];
        match state {
            State::Code => match b {
                b'/' if bytes.get(i + 1) == Some(&b'/') => {
                    state = State::LineComment;
                    i += 1;
                }
                b'/' if bytes.get(i + 1) == Some(&b'*') => {
                    state = State::BlockComment(i);
                    i += 1;
                }
                b'"' if bytes[i..].starts_with(b"\"\"\"") => {
                    state = State::TextBlock(i);
                    i += 2;
                }
                b'"' => state = State::Str(i),
                b'\'' => state = State::Char(i),
                b'(' => depth += 1,
                b')' => depth = depth.saturating_sub(1),
                b';' if depth == 0 => {
                    push(frag_start, i, &mut outcome.lines);
                    frag_start = i + 1;
                }
                _ => {}
            },
            State::LineComment => {
                if b == b'\n' {
                    state = State::Code;
                }
            }
            State::BlockComment(_) => {
                if b == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    state = State::Code;
                    i += 1;
                }
            }
            State::Str(_) | State::Char(_) => {
                let quote = if matches!(state, State::Str(_)) { b'"' } else { b'\'' };
                if b == b'\\' {
                    i += 1;
                } else if b == quote {
                    state = State::Code;
                }
            }
            State::TextBlock(_) => {
                if b == b'\\' {
                    i += 1;
                } else if bytes[i..].starts_with(b"\"\"\"") {
                    state = State::Code;
                    i += 2;
                }
            }
        }
        i += 1;
    }
    push(frag_start, raw_text.len(), &mut outcome.lines);

    let open = match state {
        State::Str(o) => Some((SplitWarningKind::UnterminatedString, o)),
        State::Char(o) => Some((SplitWarningKind::UnterminatedChar, o)),
        State::TextBlock(o) => Some((SplitWarningKind::UnterminatedTextBlock, o)),
        State::BlockComment(o) => Some((SplitWarningKind::UnterminatedComment, o)),
        State::Code | State::LineComment => None,
    };
    if let Some((kind, offset)) = open {
        tracing::warn!(?kind, offset, "literal or comment runs to end of text");
        outcome.warnings.push(SplitWarning { kind, offset });
    }
    outcome
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(is_ident_start) && chars.all(is_ident_char)
}

fn valid_fqn(fqn: &str) -> bool {
    let mut n = 0;
    for seg in fqn.split('.') {
        if !is_identifier(seg) {
            return false;
        }
        n += 1;
    }
    n >= 2
}

/// Validate a record and re-anchor its annotations to lines.
pub fn parse_annotated(record: &CorpusRecord) -> Result<AnnotatedUnit, CorpusError> {
    let id = &record.id;
    if id.is_empty() {
        return Err(malformed(id, "empty id"));
    }
    let text = &record.text;
    if text.trim().is_empty() {
        return Err(malformed(id, "empty text"));
    }
    let lines = split_lines(text);

    let mut sorted: Vec<&RecordAnnotation> = record.annotations.iter().collect();
    sorted.sort_by_key(|a| (a.start, a.end));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(CorpusError::OverlapError {
                id: id.clone(),
                a_start: pair[0].start,
                a_end: pair[0].end,
                b_start: pair[1].start,
                b_end: pair[1].end,
            });
        }
    }

    let mut annotations = Vec::with_capacity(sorted.len());
    for a in sorted {
        if a.start >= a.end
            || a.end > text.len()
            || !text.is_char_boundary(a.start)
            || !text.is_char_boundary(a.end)
        {
            return Err(CorpusError::SpanOutOfBounds {
                id: id.clone(),
                start: a.start,
                end: a.end,
                len: text.len(),
            });
        }
        let surface = &text[a.start..a.end];
        if !is_identifier(surface) {
            return Err(malformed(id, format!("annotated surface {surface:?} is not an identifier")));
        }
        if text[..a.start].chars().next_back().is_some_and(is_ident_char)
            || text[a.end..].chars().next().is_some_and(is_ident_char)
        {
            return Err(malformed(id, format!("annotation on {surface:?} splits an identifier")));
        }
        if !valid_fqn(&a.fqn) {
            return Err(malformed(id, format!("{:?} is not a qualified name", a.fqn)));
        }
        let line = lines
            .iter()
            .find(|l| l.span.0 <= a.start && a.end <= l.span.1)
            .ok_or_else(|| malformed(id, format!("annotation on {surface:?} lies outside any code line")))?;
        let span = (a.start - line.span.0, a.end - line.span.0);
        let inserted = match a.kind {
            AnnotationKind::TypeName => {
                let prefix = a
                    .fqn
                    .strip_suffix(surface)
                    .filter(|p| p.ends_with('.'))
                    .ok_or_else(|| {
                        malformed(id, format!("type name {surface:?} is not the last segment of {:?}", a.fqn))
                    })?;
                if line.text[..span.0].ends_with(prefix) {
                    String::new()
                } else {
                    prefix.to_string()
                }
            }
            AnnotationKind::Receiver => a.fqn.clone(),
        };
        annotations.push(FqnAnnotation {
            line_index: line.index,
            span,
            surface: surface.to_string(),
            fqn: a.fqn.clone(),
            kind: a.kind,
            inserted,
        });
    }

    Ok(AnnotatedUnit {
        unit: SourceUnit::new(id.clone(), text.clone(), record.library.clone()),
        lines,
        annotations,
    })
}

pub fn parse_record_line(line: &str, line_no: usize) -> Result<CorpusRecord, CorpusError> {
    serde_json::from_str(line).map_err(|source| CorpusError::Json { line: line_no, source })
}

/// Read a JSON-lines corpus. Blank lines are skipped.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record_line(&line, n + 1)?);
    }
    Ok(out)
}

pub fn write_corpus<'a>(
    mut out: impl Write,
    records: impl IntoIterator<Item = &'a CorpusRecord>,
) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|source| CorpusError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Lookup tables for [`annotate_by_imports`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    /// Simple name to FQN for implicitly imported packages.
    pub default_types: BTreeMap<String, String>,
}

const JAVA_LANG: &[&str] = &[
    "Appendable", "ArithmeticException", "ArrayIndexOutOfBoundsException", "AutoCloseable",
    "Boolean", "Byte", "CharSequence", "Character", "Class", "ClassCastException",
    "ClassNotFoundException", "CloneNotSupportedException", "Cloneable", "Comparable",
    "Deprecated", "Double", "Enum", "Error", "Exception", "Float", "FunctionalInterface",
    "IllegalArgumentException", "IllegalStateException", "IndexOutOfBoundsException",
    "Integer", "InterruptedException", "Iterable", "Long", "Math", "NullPointerException",
    "Number", "NumberFormatException", "Object", "Override", "Process", "Runnable", "Runtime",
    "RuntimeException", "SafeVarargs", "Short", "StackOverflowError", "StrictMath", "String",
    "StringBuffer", "StringBuilder", "SuppressWarnings", "System", "Thread", "ThreadLocal",
    "Throwable", "UnsupportedOperationException", "Void",
];

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            default_types: JAVA_LANG
                .iter()
                .map(|s| (s.to_string(), format!("java.lang.{s}")))
                .collect(),
        }
    }
}

/// A name the annotator saw but could not resolve. `offset` is a byte
/// offset into the unit text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unresolved {
    pub name: String,
    pub offset: usize,
    pub kind: AnnotationKind,
}

#[derive(Debug, Clone)]
pub struct AnnotationOutcome {
    pub unit: AnnotatedUnit,
    pub unresolved: Vec<Unresolved>,
}

fn is_capitalized(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

/// Annotate a self-contained file using its import table, its own type
/// declarations, and a default-package table. Receivers resolve through the
/// most recent earlier declaration of the variable. Anything unresolvable is
/// skipped and reported.
pub fn annotate_by_imports(unit: SourceUnit, config: &AnnotatorConfig) -> AnnotationOutcome {
    let detect_cfg = DetectConfig::default();
    let lines = split_lines(&unit.raw_text);
    let lexed = detect::lex_lines(&lines);

    let mut imports: HashMap<String, String> = HashMap::new();
    let mut package: Option<String> = None;
    let mut header_lines = vec![false; lexed.len()];
    for (li, line) in lexed.iter().enumerate() {
        let first = line.lexemes.first().map(|l| l.text(&line.text));
        match first {
            Some("import") => {
                header_lines[li] = true;
                let path = dotted_path(line, 1);
                let is_static = path.first().map(String::as_str) == Some("static");
                if !is_static && !line.text.trim_end().ends_with('*') && path.len() >= 2 {
                    let simple = path.last().unwrap().clone();
                    imports.insert(simple, path.join("."));
                }
            }
            Some("package") => {
                header_lines[li] = true;
                let path = dotted_path(line, 1);
                if !path.is_empty() {
                    package = Some(path.join("."));
                }
            }
            _ => {}
        }
    }

    let mut local_types: HashMap<String, String> = HashMap::new();
    if let Some(pkg) = &package {
        for line in &lexed {
            for w in line.lexemes.windows(2) {
                let kw = w[0].text(&line.text);
                if matches!(kw, "class" | "interface" | "enum" | "record") && w[1].kind == LexKind::Ident {
                    let name = w[1].text(&line.text);
                    local_types.insert(name.to_string(), format!("{pkg}.{name}"));
                }
            }
        }
    }

    let resolve = |name: &str| -> Option<String> {
        imports
            .get(name)
            .or_else(|| local_types.get(name))
            .or_else(|| config.default_types.get(name))
            .cloned()
    };

    let declarations = detect::scan_declarations(&lexed, &detect_cfg);
    let mut records = Vec::new();
    let mut unresolved = Vec::new();

    for (li, line) in lexed.iter().enumerate() {
        if header_lines[li] {
            continue;
        }
        let base = lines[li].span.0;
        let lx = &line.lexemes;
        for (i, l) in lx.iter().enumerate() {
            if l.kind != LexKind::Ident {
                continue;
            }
            let name = l.text(&line.text);
            let prev = i.checked_sub(1).map(|p| &lx[p]);
            let next = lx.get(i + 1);
            if prev.is_some_and(|p| p.is_punct('.')) {
                continue;
            }
            if is_capitalized(name) {
                let prev_text = prev.map(|p| p.text(&line.text));
                if matches!(prev_text, Some("class" | "interface" | "enum" | "record")) {
                    continue;
                }
                if next.is_some_and(|n| n.is_punct('(')) && prev_text != Some("new") {
                    continue;
                }
                match resolve(name) {
                    Some(fqn) if fqn.ends_with(&format!(".{name}")) => records.push(RecordAnnotation {
                        start: base + l.start,
                        end: base + l.end,
                        fqn,
                        kind: AnnotationKind::TypeName,
                    }),
                    _ => unresolved.push(Unresolved {
                        name: name.to_string(),
                        offset: base + l.start,
                        kind: AnnotationKind::TypeName,
                    }),
                }
                continue;
            }
            if detect_cfg.is_keyword(name)
                || !next.is_some_and(|n| n.is_punct('.'))
                || !lx.get(i + 2).is_some_and(|n| n.kind == LexKind::Ident)
                || detect::is_qualified_chain(line, i)
            {
                continue;
            }
            let decl = declarations
                .iter()
                .filter(|d| d.name == name && (d.line, d.name_start) < (li, l.start))
                .last();
            let fqn = decl.and_then(|d| receiver_type_fqn(d, &resolve));
            match fqn {
                Some(fqn) => records.push(RecordAnnotation {
                    start: base + l.start,
                    end: base + l.end,
                    fqn,
                    kind: AnnotationKind::Receiver,
                }),
                None => unresolved.push(Unresolved {
                    name: name.to_string(),
                    offset: base + l.start,
                    kind: AnnotationKind::Receiver,
                }),
            }
        }
    }

    let record = CorpusRecord {
        id: unit.id.clone(),
        library: unit.library.clone(),
        text: unit.raw_text.clone(),
        annotations: records,
    };
    let annotated = match parse_annotated(&record) {
        Ok(a) => a,
        Err(e) => {
            // Only reachable for degenerate input such as an empty file.
            tracing::warn!(error = %e, unit = %unit.id, "annotator output rejected");
            AnnotatedUnit::unannotated(unit)
        }
    };
    AnnotationOutcome {
        unit: annotated,
        unresolved,
    }
}

fn dotted_path(line: &LexedLine, from: usize) -> Vec<String> {
    line.lexemes[from.min(line.lexemes.len())..]
        .iter()
        .filter(|l| l.kind == LexKind::Ident)
        .map(|l| l.text(&line.text).to_string())
        .collect()
}

fn receiver_type_fqn(d: &detect::Declaration, resolve: &impl Fn(&str) -> Option<String>) -> Option<String> {
    if d.array_dims > 0 || d.type_path.is_empty() {
        return None;
    }
    let head = &d.type_path[0];
    if d.type_path.len() == 1 {
        return if is_capitalized(head) { resolve(head) } else { None };
    }
    let last = d.type_path.last().unwrap();
    if !is_capitalized(last) {
        return None;
    }
    if is_capitalized(head) {
        let outer = resolve(head)?;
        let rest = d.type_path[1..].join(".");
        Some(format!("{outer}.{rest}"))
    } else {
        Some(d.type_path.join("."))
    }
}

/// A declaration line removed by [`make_eval_variant`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedDeclaration {
    pub line_index: usize,
    pub text: String,
    pub variables: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EvalVariant {
    pub unit: AnnotatedUnit,
    pub removed: Vec<RemovedDeclaration>,
}

/// Lines that start with a local variable declaration, with their variables.
pub fn declaration_lines(unit: &AnnotatedUnit) -> Vec<(usize, Vec<String>)> {
    let cfg = DetectConfig::default();
    let lexed = detect::lex_lines(&unit.lines);
    let decls = detect::scan_declarations(&lexed, &cfg);
    let mut out: Vec<(usize, Vec<String>)> = Vec::new();
    for d in decls.iter().filter(|d| d.starts_statement) {
        match out.last_mut() {
            Some((line, vars)) if *line == d.line => vars.push(d.name.clone()),
            _ => out.push((d.line, vec![d.name.clone()])),
        }
    }
    out
}

/// Remove 0-2 variable-declaration lines, chosen by `seed`, so later uses of
/// those variables become undeclared receivers. Annotations on removed lines
/// are dropped; the rest keep their gold FQNs.
pub fn make_eval_variant(unit: &AnnotatedUnit, seed: u64) -> EvalVariant {
    let candidates = declaration_lines(unit);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = candidates.len().min(2);
    let count = if max == 0 { 0 } else { rng.gen_range(0..=max) };
    if count == 0 {
        return EvalVariant {
            unit: unit.clone(),
            removed: Vec::new(),
        };
    }
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), count).into_vec();
    picked.sort_unstable();

    let text = &unit.unit.raw_text;
    let mut cuts: Vec<(usize, usize)> = Vec::new();
    let mut removed = Vec::new();
    for &p in &picked {
        let (li, vars) = &candidates[p];
        let start = unit.lines[*li].span.0;
        let end = unit.lines.get(li + 1).map_or(text.len(), |next| next.span.0);
        cuts.push((start, end));
        removed.push(RemovedDeclaration {
            line_index: *li,
            text: unit.lines[*li].text.clone(),
            variables: vars.clone(),
        });
    }

    let shift = |offset: usize| -> Option<usize> {
        let mut delta = 0;
        for &(s, e) in &cuts {
            if offset >= e {
                delta += e - s;
            } else if offset >= s {
                return None;
            }
        }
        Some(offset - delta)
    };

    let mut new_text = String::with_capacity(text.len());
    let mut cursor = 0;
    for &(s, e) in &cuts {
        new_text.push_str(&text[cursor..s]);
        cursor = e;
    }
    new_text.push_str(&text[cursor..]);

    let record = unit.to_record();
    let annotations = record
        .annotations
        .iter()
        .filter_map(|a| {
            Some(RecordAnnotation {
                start: shift(a.start)?,
                end: shift(a.end - 1)? + 1,
                fqn: a.fqn.clone(),
                kind: a.kind,
            })
        })
        .collect();
    let variant = CorpusRecord {
        id: record.id,
        library: record.library,
        text: new_text,
        annotations,
    };
    match parse_annotated(&variant) {
        Ok(unit) => EvalVariant { unit, removed },
        Err(e) => {
            // The whole unit was declarations; keep the original.
            tracing::warn!(error = %e, "eval variant rejected, keeping original unit");
            EvalVariant {
                unit: unit.clone(),
                removed: Vec::new(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(raw: &str) -> Vec<String> {
        split_lines(raw).into_iter().map(|l| l.text).collect()
    }

    #[test]
    fn splits_focus_lines_on_semicolons() {
        assert_eq!(
            texts("LocalTime base = new LocalTime(13,0,0); if (cal != null) { ..."),
            vec!["LocalTime base = new LocalTime(13,0,0)", "if (cal != null) { ..."]
        );
    }

    #[test]
    fn empty_text_has_no_lines() {
        assert!(split_lines("").is_empty());
        assert!(split_lines(" ;; \n ;").is_empty());
    }

    #[test]
    fn for_header_is_one_line() {
        assert_eq!(
            texts("for (int i = 0; i < n; i++) { f(); }"),
            vec!["for (int i = 0; i < n; i++) { f()", "}"]
        );
    }

    #[test]
    fn literals_and_comments_do_not_split() {
        assert_eq!(
            texts("a(\";\"); b = ';'; // c; d\n e /* ; */ f; g = \"\"\"x;\n\"\"\""),
            vec!["a(\";\")", "b = ';'", "// c; d\n e /* ; */ f", "g = \"\"\"x;\n\"\"\""]
        );
    }

    #[test]
    fn unterminated_string_warns() {
        let out = split_lines_reporting("a; b = \"oops; c");
        assert_eq!(out.lines.len(), 2);
        assert_eq!(out.lines[1].text, "b = \"oops; c");
        assert_eq!(
            out.warnings,
            vec![SplitWarning {
                kind: SplitWarningKind::UnterminatedString,
                offset: 7
            }]
        );
    }

    #[test]
    fn escaped_quote_stays_in_string() {
        assert_eq!(texts(r#"s = "a\";b"; t"#), vec![r#"s = "a\";b""#, "t"]);
    }

    fn joda_record() -> CorpusRecord {
        let text = "LocalTime base = new LocalTime(13,0,0); DateTime dt = base.toDateTime(cal);";
        let at = |needle: &str, nth: usize| text.match_indices(needle).nth(nth).unwrap().0;
        let ann = |start: usize, len: usize, fqn: &str, kind| RecordAnnotation {
            start,
            end: start + len,
            fqn: fqn.into(),
            kind,
        };
        CorpusRecord {
            id: "joda-1".into(),
            library: "joda-time".into(),
            text: text.into(),
            annotations: vec![
                ann(at("LocalTime", 0), 9, "org.joda.time.LocalTime", AnnotationKind::TypeName),
                ann(at("LocalTime", 1), 9, "org.joda.time.LocalTime", AnnotationKind::TypeName),
                ann(at("DateTime", 0), 8, "org.joda.time.DateTime", AnnotationKind::TypeName),
                ann(at("base", 1), 4, "org.joda.time.LocalTime", AnnotationKind::Receiver),
            ],
        }
    }

    #[test]
    fn parses_and_renders_annotations() {
        let unit = parse_annotated(&joda_record()).unwrap();
        assert_eq!(unit.lines.len(), 2);
        assert_eq!(unit.annotations.len(), 4);
        assert_eq!(unit.annotations[0].span, (0, 9));
        assert_eq!(unit.annotations[0].inserted_text(), "org.joda.time.");
        assert_eq!(unit.annotations[3].inserted_text(), "org.joda.time.LocalTime");
        assert_eq!(
            unit.render_annotated_line(1),
            "org.joda.time.DateTime dt = org.joda.time.LocalTime.toDateTime(cal)"
        );
    }

    #[test]
    fn zero_annotations() {
        let mut r = joda_record();
        r.annotations.clear();
        assert!(parse_annotated(&r).unwrap().annotations.is_empty());
    }

    #[test]
    fn inverted_span_is_out_of_bounds() {
        let mut r = joda_record();
        r.annotations = vec![RecordAnnotation {
            start: 10,
            end: 5,
            fqn: "a.B".into(),
            kind: AnnotationKind::TypeName,
        }];
        assert!(matches!(parse_annotated(&r), Err(CorpusError::SpanOutOfBounds { .. })));
        r.annotations[0].start = 70;
        r.annotations[0].end = 500;
        assert!(matches!(parse_annotated(&r), Err(CorpusError::SpanOutOfBounds { .. })));
    }

    #[test]
    fn overlapping_annotations_rejected() {
        let mut r = joda_record();
        r.annotations.push(RecordAnnotation {
            start: 2,
            end: 6,
            fqn: "a.B".into(),
            kind: AnnotationKind::Receiver,
        });
        assert!(matches!(parse_annotated(&r), Err(CorpusError::OverlapError { .. })));
    }

    #[test]
    fn bad_fqn_and_mismatched_surface_rejected() {
        let mut r = joda_record();
        r.annotations.truncate(1);
        r.annotations[0].fqn = "LocalTime".into();
        assert!(matches!(parse_annotated(&r), Err(CorpusError::MalformedRecord { .. })));
        r.annotations[0].fqn = "org.joda.time.DateTime".into();
        assert!(matches!(parse_annotated(&r), Err(CorpusError::MalformedRecord { .. })));
        let missing: Result<CorpusRecord, _> = serde_json::from_str(r#"{"id":"x","text":"a"}"#);
        assert!(missing.is_err());
    }

    #[test]
    fn already_qualified_type_inserts_nothing() {
        let r = CorpusRecord {
            id: "q".into(),
            library: "l".into(),
            text: "java.util.List xs = f()".into(),
            annotations: vec![RecordAnnotation {
                start: 10,
                end: 14,
                fqn: "java.util.List".into(),
                kind: AnnotationKind::TypeName,
            }],
        };
        let unit = parse_annotated(&r).unwrap();
        assert_eq!(unit.annotations[0].inserted_text(), "");
        assert_eq!(unit.render_annotated_line(0), "java.util.List xs = f()");
    }

    #[test]
    fn record_round_trip() {
        let r = joda_record();
        let unit = parse_annotated(&r).unwrap();
        assert_eq!(unit.to_record(), r);
        assert_eq!(parse_annotated(&unit.to_record()).unwrap(), unit);
        let mut buf = Vec::new();
        write_corpus(&mut buf, [&r]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(parse_record_line(line.trim(), 1).unwrap(), r);
    }

    const URL_FILE: &str = "package demo;\nimport java.net.URL;\nimport java.io.*;\n\
        class Fetch {\n  void run(String spec) {\n    URL url = new URL(spec);\n    \
        Widget w = make();\n    url.openStream();\n  }\n}\n";

    #[test]
    fn annotates_imported_type() {
        let out = annotate_by_imports(SourceUnit::new("u", URL_FILE, "jdk"), &AnnotatorConfig::default());
        let anns: Vec<_> = out
            .unit
            .annotations
            .iter()
            .map(|a| (a.surface.as_str(), a.fqn.as_str(), a.kind))
            .collect();
        assert!(anns.contains(&("URL", "java.net.URL", AnnotationKind::TypeName)));
        assert!(anns.contains(&("String", "java.lang.String", AnnotationKind::TypeName)));
        assert!(anns.contains(&("url", "java.net.URL", AnnotationKind::Receiver)));
        assert_eq!(anns.iter().filter(|a| a.0 == "URL").count(), 2);
        assert!(!anns.iter().any(|a| a.0 == "Fetch"));
        let missing: Vec<_> = out.unresolved.iter().map(|u| u.name.as_str()).collect();
        assert_eq!(missing, vec!["Widget"]);
    }

    #[test]
    fn no_imports_no_names_no_annotations() {
        let out = annotate_by_imports(
            SourceUnit::new("u", "int x = 1; x = x + 2;", "l"),
            &AnnotatorConfig::default(),
        );
        assert!(out.unit.annotations.is_empty());
        assert!(out.unresolved.is_empty());
    }

    #[test]
    fn receiver_resolves_through_declaration() {
        let src = "import org.joda.time.LocalTime;\nLocalTime base = new LocalTime(13,0,0);\n\
                   DateTime dt = base.toDateTime(cal);";
        let out = annotate_by_imports(SourceUnit::new("u", src, "joda"), &AnnotatorConfig::default());
        let recv: Vec<_> = out
            .unit
            .annotations
            .iter()
            .filter(|a| a.kind == AnnotationKind::Receiver)
            .collect();
        assert_eq!(recv.len(), 1);
        assert_eq!(recv[0].surface, "base");
        assert_eq!(recv[0].fqn, "org.joda.time.LocalTime");
        assert!(out.unresolved.iter().any(|u| u.name == "DateTime"));
    }

    const READER_UNIT: &str = "BufferedReader reader = open(path); String first = reader.readLine(); \
                               int n = first.length(); reader.close();";

    fn reader_unit() -> AnnotatedUnit {
        let src = format!("import java.io.BufferedReader;\n{READER_UNIT}");
        let out = annotate_by_imports(SourceUnit::new("r", src, "jdk"), &AnnotatorConfig::default());
        out.unit
    }

    #[test]
    fn eval_variant_is_deterministic() {
        let unit = reader_unit();
        for seed in 0..20 {
            let a = make_eval_variant(&unit, seed);
            let b = make_eval_variant(&unit, seed);
            assert_eq!(a.unit, b.unit);
            assert_eq!(a.removed, b.removed);
            assert!(a.removed.len() <= 2);
        }
    }

    #[test]
    fn eval_variant_without_declarations_is_unchanged() {
        let unit = parse_annotated(&CorpusRecord {
            id: "n".into(),
            library: "l".into(),
            text: "f(); g(x);".into(),
            annotations: vec![],
        })
        .unwrap();
        let v = make_eval_variant(&unit, 7);
        assert_eq!(v.unit, unit);
        assert!(v.removed.is_empty());
    }

    #[test]
    fn removing_reader_declaration_leaves_undeclared_receiver() {
        let unit = reader_unit();
        let seed = (0..200u64)
            .find(|&s| {
                make_eval_variant(&unit, s)
                    .removed
                    .iter()
                    .any(|r| r.variables == ["reader"])
            })
            .expect("some seed removes the reader declaration");
        let v = make_eval_variant(&unit, seed);
        assert!(!v.unit.unit.raw_text.contains("BufferedReader reader"));
        let points = crate::detect::find_points(&v.unit.unit);
        assert!(points
            .iter()
            .any(|p| p.simple_name == "reader" && p.kind == crate::detect::PointKind::Receiver));
        let gold = v
            .unit
            .annotations
            .iter()
            .find(|a| a.surface == "reader")
            .unwrap();
        assert_eq!(gold.fqn, "java.io.BufferedReader");
    }

    proptest! {
        #[test]
        fn split_reconstructs_input(raw in "[a-z(){}\";' \n/*]{0,60}") {
            let out = split_lines_reporting(&raw);
            let mut cursor = 0;
            for (i, line) in out.lines.iter().enumerate() {
                prop_assert_eq!(line.index, i);
                prop_assert_eq!(&raw[line.span.0..line.span.1], line.text.as_str());
                prop_assert!(line.span.0 >= cursor);
                prop_assert!(raw[cursor..line.span.0].chars().all(|c| c.is_whitespace() || c == ';'));
                cursor = line.span.1;
            }
            prop_assert!(raw[cursor..].chars().all(|c| c.is_whitespace() || c == ';'));
            prop_assert_eq!(split_lines(&raw), out.lines);
        }
    }
}
