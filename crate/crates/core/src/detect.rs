//! Lexical detection of inference points in partial code.
//!
//! Three patterns are recognised per code line: the type of a variable
//! declaration, the type of a `new` expression, and a receiver variable that
//! is used but never declared. Everything is token based; the code does not
//! have to parse.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{split_lines, CodeLine, SourceUnit};
use crate::lexer::{lex, LexKind, Lexeme};

/// Bumped whenever the pattern rules change.
pub const PATTERN_TABLE_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PointKind {
    DeclType,
    NewType,
    Receiver,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InferencePoint {
    pub kind: PointKind,
    pub line_index: usize,
    /// Byte range of the simple name (or receiver variable) within the line.
    pub span: (usize, usize),
    pub simple_name: String,
    pub declared_locally: bool,
}

const KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "do", "double", "else", "enum", "extends", "false", "final",
    "finally", "float", "for", "goto", "if", "implements", "import", "instanceof", "int",
    "interface", "long", "native", "new", "null", "package", "private", "protected", "public",
    "return", "short", "static", "strictfp", "super", "switch", "synchronized", "this", "throw",
    "throws", "transient", "true", "try", "var", "void", "volatile", "while", "yield", "record",
    "sealed", "permits",
];

const PRIMITIVES: &[&str] = &[
    "boolean", "byte", "char", "double", "float", "int", "long", "short", "var", "void",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub keywords: BTreeSet<String>,
    pub primitives: BTreeSet<String>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            keywords: KEYWORDS.iter().map(|s| s.to_string()).collect(),
            primitives: PRIMITIVES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl DetectConfig {
    pub fn is_keyword(&self, s: &str) -> bool {
        self.keywords.contains(s)
    }

    pub fn is_primitive(&self, s: &str) -> bool {
        self.primitives.contains(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectWarning {
    pub line_index: usize,
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Detection {
    pub points: Vec<InferencePoint>,
    pub warnings: Vec<DetectWarning>,
}

#[derive(Debug, Clone)]
pub struct LexedLine {
    pub index: usize,
    pub text: String,
    pub lexemes: Vec<Lexeme>,
}

impl LexedLine {
    fn ident(&self, i: usize) -> Option<&str> {
        self.lexemes
            .get(i)
            .filter(|l| l.kind == LexKind::Ident)
            .map(|l| l.text(&self.text))
    }

    fn punct(&self, i: usize, c: char) -> bool {
        self.lexemes.get(i).is_some_and(|l| l.is_punct(c))
    }

    fn is_header(&self) -> bool {
        matches!(self.ident(0), Some("import" | "package"))
    }
}

pub(crate) fn lex_lines(lines: &[CodeLine]) -> Vec<LexedLine> {
    lines
        .iter()
        .map(|l| LexedLine {
            index: l.index,
            text: l.text.clone(),
            lexemes: lex(&l.text),
        })
        .collect()
}

fn capitalized(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

/// A variable declaration. An empty `type_path` means the type is not
/// written (lambda parameters).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declaration {
    pub name: String,
    pub line: usize,
    pub name_start: usize,
    pub type_path: Vec<String>,
    pub array_dims: usize,
    /// Only modifiers precede the type on its line.
    pub starts_statement: bool,
}

#[derive(Debug, Clone)]
struct TypeRef {
    /// Lexeme index one past the type.
    end: usize,
    path: Vec<usize>,
    args: Vec<TypeRef>,
    array_dims: usize,
}

impl TypeRef {
    fn lexemes(&self, out: &mut Vec<usize>) {
        out.extend(&self.path);
        for a in &self.args {
            a.lexemes(out);
        }
    }
}

enum TypeParse {
    Type(TypeRef),
    NotAType,
    /// Outer name followed by `<` whose arguments could not be parsed.
    BrokenGeneric(usize),
}

fn parse_type(line: &LexedLine, i: usize, cfg: &DetectConfig, allow_primitive: bool) -> TypeParse {
    let Some(head) = line.ident(i) else {
        return TypeParse::NotAType;
    };
    let mut path = vec![i];
    let mut j = i + 1;
    if cfg.is_primitive(head) {
        if !allow_primitive {
            return TypeParse::NotAType;
        }
    } else {
        if cfg.is_keyword(head) {
            return TypeParse::NotAType;
        }
        while line.punct(j, '.') && line.ident(j + 1).is_some_and(|s| !cfg.is_keyword(s)) {
            path.push(j + 1);
            j += 2;
        }
        let last = line.ident(*path.last().unwrap()).unwrap();
        if !capitalized(last) {
            return TypeParse::NotAType;
        }
    }
    let mut args = Vec::new();
    if line.punct(j, '<') {
        match parse_type_args(line, j + 1, cfg) {
            Some((a, end)) => {
                args = a;
                j = end;
            }
            None => return TypeParse::BrokenGeneric(i),
        }
    }
    let mut array_dims = 0;
    while line.punct(j, '[') && line.punct(j + 1, ']') {
        array_dims += 1;
        j += 2;
    }
    if line.punct(j, '.') && line.punct(j + 1, '.') && line.punct(j + 2, '.') {
        array_dims += 1;
        j += 3;
    }
    TypeParse::Type(TypeRef {
        end: j,
        path,
        args,
        array_dims,
    })
}

/// Parse after `<` up to and including the matching `>`.
fn parse_type_args(line: &LexedLine, mut j: usize, cfg: &DetectConfig) -> Option<(Vec<TypeRef>, usize)> {
    let mut args = Vec::new();
    if line.punct(j, '>') {
        return Some((args, j + 1));
    }
    loop {
        if line.punct(j, '?') {
            j += 1;
            if matches!(line.ident(j), Some("extends" | "super")) {
                j += 1;
            } else if line.punct(j, ',') || line.punct(j, '>') {
                if line.punct(j, '>') {
                    return Some((args, j + 1));
                }
                j += 1;
                continue;
            }
        }
        match parse_type(line, j, cfg, true) {
            TypeParse::Type(t) => {
                j = t.end;
                args.push(t);
            }
            _ => return None,
        }
        if line.punct(j, ',') {
            j += 1;
        } else if line.punct(j, '>') {
            return Some((args, j + 1));
        } else {
            return None;
        }
    }
}

#[derive(Default)]
struct LineScan {
    decls: Vec<(TypeRef, usize, bool)>,
    extra_names: Vec<usize>,
    lambda_params: Vec<usize>,
    news: Vec<TypeRef>,
    broken: Vec<usize>,
    consumed: Vec<bool>,
}

const MODIFIERS: &[&str] = &["final", "static", "private", "public", "protected", "transient", "volatile"];

fn scan_line(line: &LexedLine, cfg: &DetectConfig) -> LineScan {
    let lx = &line.lexemes;
    let n = lx.len();
    let mut scan = LineScan {
        consumed: vec![false; n],
        ..Default::default()
    };
    let name_follows = |k: usize| {
        k >= n
            || [';', '=', ',', ')', ':', '['].iter().any(|&c| lx[k].is_punct(c))
    };
    let prev_ok = |i: usize| {
        if i == 0 {
            return true;
        }
        let p = &lx[i - 1];
        match p.kind {
            LexKind::Punct(c) => c != '.' && c != '@',
            LexKind::Ident => {
                let t = p.text(&line.text);
                (cfg.is_keyword(t) && !cfg.is_primitive(t) && t != "new")
                    || (i >= 2 && lx[i - 2].is_punct('@'))
            }
            _ => false,
        }
    };

    let mut depth = 0i32;
    let mut i = 0;
    while i < n {
        let l = &lx[i];
        match l.kind {
            LexKind::Punct('(') => depth += 1,
            LexKind::Punct(')') => {
                depth -= 1;
                if line.punct(i + 1, '-') && line.punct(i + 2, '>') {
                    let mut k = i;
                    while k > 0 {
                        k -= 1;
                        if lx[k].is_punct('(') {
                            break;
                        }
                        if lx[k].kind == LexKind::Ident
                            && (lx[k + 1].is_punct(',') || lx[k + 1].is_punct(')'))
                        {
                            scan.lambda_params.push(k);
                        }
                    }
                }
            }
            LexKind::Ident => {
                let text = l.text(&line.text);
                if text == "new" {
                    if let TypeParse::Type(t) = parse_type(line, i + 1, cfg, true) {
                        if t.end >= n || ['(', '[', '{'].iter().any(|&c| lx[t.end].is_punct(c)) {
                            let mut used = Vec::new();
                            t.lexemes(&mut used);
                            for u in used {
                                scan.consumed[u] = true;
                            }
                            i = t.end;
                            scan.news.push(t);
                            continue;
                        }
                    }
                } else if line.punct(i + 1, '-') && line.punct(i + 2, '>') && !cfg.is_keyword(text) {
                    scan.lambda_params.push(i);
                } else if prev_ok(i) && !scan.consumed[i] {
                    match parse_type(line, i, cfg, true) {
                        TypeParse::Type(t) => {
                            let name = t.end;
                            if line.ident(name).is_some_and(|s| !cfg.is_keyword(s)) && name_follows(name + 1) {
                                let mut used = Vec::new();
                                t.lexemes(&mut used);
                                for u in used {
                                    scan.consumed[u] = true;
                                }
                                let starts = lx[..i].iter().all(|m| {
                                    m.kind == LexKind::Ident && MODIFIERS.contains(&m.text(&line.text))
                                });
                                let mut k = name + 1;
                                if depth == 0 {
                                    while line.punct(k, ',')
                                        && line.ident(k + 1).is_some_and(|s| !cfg.is_keyword(s))
                                        && name_follows(k + 2)
                                        && !line.punct(k + 2, ')')
                                    {
                                        scan.extra_names.push(k + 1);
                                        k += 2;
                                    }
                                }
                                scan.decls.push((t, name, starts));
                                i = k;
                                continue;
                            }
                        }
                        TypeParse::BrokenGeneric(h) => {
                            if capitalized(text) && line.ident(i + 2).is_some_and(capitalized) {
                                scan.broken.push(h);
                                let stop = (i + 1..n)
                                    .find(|&k| ['=', '(', ')', '{', '}'].iter().any(|&c| lx[k].is_punct(c)))
                                    .unwrap_or(n);
                                for c in &mut scan.consumed[i..stop] {
                                    *c = true;
                                }
                                i = stop;
                                continue;
                            }
                        }
                        TypeParse::NotAType => {}
                    }
                }
            }
            _ => {}
        }
        i += 1;
    }
    scan
}

/// Every declaration in the unit, in source order.
pub(crate) fn scan_declarations(lines: &[LexedLine], cfg: &DetectConfig) -> Vec<Declaration> {
    let mut out = Vec::new();
    for line in lines {
        if line.is_header() {
            continue;
        }
        let scan = scan_line(line, cfg);
        let texts = |t: &TypeRef| -> Vec<String> {
            t.path.iter().map(|&p| line.ident(p).unwrap().to_string()).collect()
        };
        let mut found = Vec::new();
        for (t, name, starts) in &scan.decls {
            found.push((*name, texts(t), t.array_dims, *starts));
        }
        for &k in &scan.extra_names {
            let owner = scan.decls.iter().rev().find(|(_, name, _)| *name < k).unwrap();
            found.push((k, texts(&owner.0), owner.0.array_dims, owner.2));
        }
        for &k in &scan.lambda_params {
            found.push((k, Vec::new(), 0, false));
        }
        found.sort_by_key(|f| f.0);
        for (k, type_path, array_dims, starts_statement) in found {
            out.push(Declaration {
                name: line.ident(k).unwrap().to_string(),
                line: line.index,
                name_start: line.lexemes[k].start,
                type_path,
                array_dims,
                starts_statement,
            });
        }
    }
    out
}

/// True when the lowercase identifier at `i` opens a dotted package chain
/// that reaches a capitalized segment, as in `java.util.List`.
pub(crate) fn is_qualified_chain(line: &LexedLine, i: usize) -> bool {
    let mut j = i;
    while line.ident(j).is_some() && line.punct(j + 1, '.') {
        match line.ident(j + 2) {
            Some(next) if capitalized(next) => return true,
            Some(_) => j += 2,
            None => return false,
        }
    }
    false
}

/// Names declared anywhere in the unit.
pub fn local_declarations(unit: &SourceUnit) -> BTreeSet<String> {
    let lines = lex_lines(&split_lines(&unit.raw_text));
    scan_declarations(&lines, &DetectConfig::default())
        .into_iter()
        .map(|d| d.name)
        .collect()
}

pub fn find_points(unit: &SourceUnit) -> Vec<InferencePoint> {
    find_points_with(unit, &DetectConfig::default()).points
}

pub fn find_points_with(unit: &SourceUnit, cfg: &DetectConfig) -> Detection {
    let lines = lex_lines(&split_lines(&unit.raw_text));
    let decls = scan_declarations(&lines, cfg);
    let mut out = Detection::default();
    let mut seen_receivers: HashSet<String> = HashSet::new();

    for line in &lines {
        if line.is_header() {
            continue;
        }
        let scan = scan_line(line, cfg);
        let lx = &line.lexemes;
        let mut points: Vec<InferencePoint> = Vec::new();
        let point = |kind, idx: usize, points: &mut Vec<InferencePoint>| {
            let l = lx[idx];
            points.push(InferencePoint {
                kind,
                line_index: line.index,
                span: (l.start, l.end),
                simple_name: l.text(&line.text).to_string(),
                declared_locally: false,
            });
        };
        fn type_points(
            t: &TypeRef,
            outer: PointKind,
            line: &LexedLine,
            emit: &mut dyn FnMut(PointKind, usize),
        ) {
            let head = line.ident(t.path[0]).unwrap();
            if capitalized(head) {
                emit(outer, t.path[0]);
            }
            for a in &t.args {
                type_points(a, PointKind::DeclType, line, emit);
            }
        }
        for (t, _, _) in &scan.decls {
            type_points(t, PointKind::DeclType, line, &mut |k, i| point(k, i, &mut points));
        }
        for t in &scan.news {
            type_points(t, PointKind::NewType, line, &mut |k, i| point(k, i, &mut points));
        }
        for &h in &scan.broken {
            point(PointKind::DeclType, h, &mut points);
            out.warnings.push(DetectWarning {
                line_index: line.index,
                offset: lx[h].start,
                message: "unparseable generic arguments; kept outer type only".into(),
            });
        }

        for (i, l) in lx.iter().enumerate() {
            if l.kind != LexKind::Ident || scan.consumed[i] {
                continue;
            }
            let text = l.text(&line.text);
            if cfg.is_keyword(text) || !line.punct(i + 1, '.') || line.ident(i + 2).is_none() {
                continue;
            }
            if i > 0 && (lx[i - 1].is_punct('.') || lx[i - 1].is_punct('@')) {
                continue;
            }
            if capitalized(text) {
                if i > 0 && line.ident(i - 1) == Some("new") {
                    continue;
                }
                point(PointKind::DeclType, i, &mut points);
                continue;
            }
            if is_qualified_chain(line, i) || seen_receivers.contains(text) {
                continue;
            }
            let declared = decls
                .iter()
                .any(|d| d.name == text && (d.line, d.name_start) < (line.index, l.start));
            if declared {
                continue;
            }
            seen_receivers.insert(text.to_string());
            point(PointKind::Receiver, i, &mut points);
        }

        points.sort_by_key(|p| p.span);
        points.dedup_by_key(|p| p.span);
        out.points.extend(points);
    }
    out
}
