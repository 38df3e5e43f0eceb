//! Lightweight lexical scanner for Java-like source text.
//!
//! Produces identifiers, literals and single-character punctuation with byte
//! spans. Comments are skipped. Nothing here needs the code to parse.

/// Lexeme category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexKind {
    Ident,
    Number,
    Str,
    Char,
    Punct(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lexeme {
    pub kind: LexKind,
    pub start: usize,
    pub end: usize,
}

impl Lexeme {
    pub fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.start..self.end]
    }

    pub fn is_punct(&self, c: char) -> bool {
        self.kind == LexKind::Punct(c)
    }
}

pub(crate) fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Scan `src` into lexemes. Unterminated literals and block comments run to
/// the end of the input.
pub fn lex(src: &str) -> Vec<Lexeme> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();

    while let Some((start, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        if c == '/' && bytes.get(start + 1) == Some(&b'/') {
            for (_, d) in chars.by_ref() {
                if d == '\n' {
                    break;
                }
            }
            continue;
        }
        if c == '/' && bytes.get(start + 1) == Some(&b'*') {
            chars.next();
            let mut prev = '\0';
            for (_, d) in chars.by_ref() {
                if prev == '*' && d == '/' {
                    break;
                }
                prev = d;
            }
            continue;
        }
        if c == '"' || c == '\'' {
            let mut end = src.len();
            let mut escaped = false;
            for (i, d) in chars.by_ref() {
                if escaped {
                    escaped = false;
                } else if d == '\\' {
                    escaped = true;
                } else if d == c {
                    end = i + 1;
                    break;
                }
            }
            let kind = if c == '"' { LexKind::Str } else { LexKind::Char };
            out.push(Lexeme { kind, start, end });
            continue;
        }
        if c.is_ascii_digit() {
            let mut end = start + c.len_utf8();
            while let Some(&(i, d)) = chars.peek() {
                let dot_digit = d == '.'
                    && src[i + 1..]
                        .chars()
                        .next()
                        .is_some_and(|n| n.is_ascii_digit());
                if is_ident_char(d) || dot_digit {
                    end = i + d.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(Lexeme { kind: LexKind::Number, start, end });
            continue;
        }
        if is_ident_start(c) {
            let mut end = start + c.len_utf8();
            while let Some(&(i, d)) = chars.peek() {
                if is_ident_char(d) {
                    end = i + d.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(Lexeme { kind: LexKind::Ident, start, end });
            continue;
        }
        out.push(Lexeme {
            kind: LexKind::Punct(c),
            start,
            end: start + c.len_utf8(),
        });
    }
    out
}
