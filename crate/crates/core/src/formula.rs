//! The MSM formula mini-language.
//!
//! ```text
//! formula := ident "~" term ("+" term)*
//! term    := factor ("*" factor)?
//! factor  := ident | ("cum" | "ave") "(" ident ")"
//! ```
//!
//! `A*B` is the product term only. `cum(D)` and `ave(D)` are the sum and the
//! mean over the treatment columns `D1 … DT`. Whitespace is insignificant.

use std::fmt;
use std::ops::Range;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Factor {
    Column(String),
    Cum(String),
    Ave(String),
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Column(c) => write!(f, "{c}"),
            Factor::Cum(p) => write!(f, "cum({p})"),
            Factor::Ave(p) => write!(f, "ave({p})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Single(Factor),
    Product(Factor, Factor),
}

impl Term {
    /// Equality up to the order of product operands.
    pub fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Single(a), Term::Single(b)) => a == b,
            (Term::Product(a, b), Term::Product(c, d)) => (a == c && b == d) || (a == d && b == c),
            _ => false,
        }
    }

    pub fn factors(&self) -> Vec<&Factor> {
        match self {
            Term::Single(a) => vec![a],
            Term::Product(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Single(a) => write!(f, "{a}"),
            Term::Product(a, b) => write!(f, "{a}*{b}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpannedTerm {
    pub term: Term,
    /// Byte range in the source text.
    pub span: Range<usize>,
}

/// A parsed formula. Equality ignores source spans.
#[derive(Debug, Clone)]
pub struct ParsedFormula {
    pub response: String,
    pub terms: Vec<SpannedTerm>,
}

impl PartialEq for ParsedFormula {
    fn eq(&self, other: &Self) -> bool {
        self.response == other.response
            && self.terms.len() == other.terms.len()
            && self
                .terms
                .iter()
                .zip(&other.terms)
                .all(|(a, b)| a.term == b.term)
    }
}

impl fmt::Display for ParsedFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", render_formula(self))
    }
}

/// Names a formula may reference. `families` maps a treatment prefix to its
/// per-period columns in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnCatalog {
    pub columns: Vec<String>,
    pub families: Vec<(String, Vec<String>)>,
}

impl ColumnCatalog {
    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c == name)
    }

    pub fn family(&self, prefix: &str) -> Option<&[String]> {
        self.families
            .iter()
            .find(|(p, _)| p == prefix)
            .map(|(_, cols)| cols.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Tilde,
    Plus,
    Star,
    LParen,
    RParen,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Tilde => write!(f, "`~`"),
            Tok::Plus => write!(f, "`+`"),
            Tok::Star => write!(f, "`*`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::End => write!(f, "end of input"),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<(Tok, Range<usize>)>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let tok = match c {
            c if c.is_whitespace() => continue,
            '~' => Tok::Tilde,
            '+' => Tok::Plus,
            '*' => Tok::Star,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            c if is_ident_start(c) => {
                let mut end = i + c.len_utf8();
                while let Some(&(j, d)) = chars.peek() {
                    if !is_ident_char(d) {
                        break;
                    }
                    end = j + d.len_utf8();
                    chars.next();
                }
                out.push((Tok::Ident(text[i..end].to_string()), i..end));
                continue;
            }
            c => {
                return Err(Error::Syntax {
                    offset: i,
                    message: format!("unexpected character {c:?}"),
                })
            }
        };
        out.push((tok, i..i + c.len_utf8()));
    }
    out.push((Tok::End, text.len()..text.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, Range<usize>)>,
    pos: usize,
    catalog: &'a ColumnCatalog,
}

impl Parser<'_> {
    fn peek(&self) -> &(Tok, Range<usize>) {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> (Tok, Range<usize>) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Range<usize>> {
        let (tok, span) = self.next();
        if tok == want {
            Ok(span)
        } else {
            Err(Error::Syntax {
                offset: span.start,
                message: format!("expected {what}, found {tok}"),
            })
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Range<usize>)> {
        match self.next() {
            (Tok::Ident(s), span) => Ok((s, span)),
            (tok, span) => Err(Error::Syntax {
                offset: span.start,
                message: format!("expected {what}, found {tok}"),
            }),
        }
    }

    fn factor(&mut self) -> Result<(Factor, Range<usize>)> {
        let (name, span) = self.ident("a column name, cum() or ave()")?;
        let is_fn = matches!(name.as_str(), "cum" | "ave") && self.peek().0 == Tok::LParen;
        if is_fn {
            self.next();
            let (prefix, pspan) = self.ident("a treatment prefix")?;
            let close = self.expect(Tok::RParen, "`)`")?;
            if self.catalog.family(&prefix).is_none() {
                return Err(Error::UnknownColumn {
                    name: prefix,
                    offset: pspan.start,
                });
            }
            let f = if name == "cum" {
                Factor::Cum(prefix)
            } else {
                Factor::Ave(prefix)
            };
            return Ok((f, span.start..close.end));
        }
        if !self.catalog.has_column(&name) {
            return Err(Error::UnknownColumn {
                name,
                offset: span.start,
            });
        }
        Ok((Factor::Column(name), span))
    }

    fn term(&mut self) -> Result<SpannedTerm> {
        let (a, span) = self.factor()?;
        if self.peek().0 == Tok::Star {
            self.next();
            let (b, bspan) = self.factor()?;
            return Ok(SpannedTerm {
                term: Term::Product(a, b),
                span: span.start..bspan.end,
            });
        }
        Ok(SpannedTerm {
            term: Term::Single(a),
            span,
        })
    }
}

/// Parses `text`, resolving every name against `catalog`.
pub fn parse_formula(text: &str, catalog: &ColumnCatalog) -> Result<ParsedFormula> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        catalog,
    };
    let (response, rspan) = p.ident("a response column")?;
    if !catalog.has_column(&response) {
        return Err(Error::UnknownColumn {
            name: response,
            offset: rspan.start,
        });
    }
    p.expect(Tok::Tilde, "`~`")?;
    let mut terms: Vec<SpannedTerm> = Vec::new();
    loop {
        let t = p.term()?;
        if terms.iter().any(|u| u.term.same_as(&t.term)) {
            return Err(Error::DuplicateTerm {
                term: t.term.to_string(),
                offset: t.span.start,
            });
        }
        terms.push(t);
        match p.next() {
            (Tok::Plus, _) => continue,
            (Tok::End, _) => break,
            (tok, span) => {
                return Err(Error::Syntax {
                    offset: span.start,
                    message: format!("expected `+` or end of input, found {tok}"),
                })
            }
        }
    }
    Ok(ParsedFormula { response, terms })
}

/// Canonical text: `Y ~ A + B*C + cum(D)`.
pub fn render_formula(f: &ParsedFormula) -> String {
    let terms: Vec<String> = f.terms.iter().map(|t| t.term.to_string()).collect();
    format!("{} ~ {}", f.response, terms.join(" + "))
}

/// Parses a linear combination of coefficients such as `10*b1 + 10*b2` or
/// `b3 - 0.5*b1`. `b0` is the intercept and `bk` the k-th term.
pub fn parse_contrast(text: &str, n_coef: usize) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(n_coef);
    let s = text.as_bytes();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < s.len() && s[*i].is_ascii_whitespace() {
            *i += 1;
        }
    };
    let mut first = true;
    loop {
        skip_ws(&mut i);
        if i == s.len() {
            if first {
                return Err(Error::Syntax {
                    offset: i,
                    message: "empty contrast".into(),
                });
            }
            break;
        }
        let mut sign = 1.0;
        if s[i] == b'+' || s[i] == b'-' {
            if s[i] == b'-' {
                sign = -1.0;
            }
            i += 1;
            skip_ws(&mut i);
        } else if !first {
            return Err(Error::Syntax {
                offset: i,
                message: "expected `+` or `-`".into(),
            });
        }
        first = false;
        let start = i;
        let mut coef = 1.0;
        if i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            while i < s.len() && (s[i].is_ascii_alphanumeric() || s[i] == b'.') && s[i] != b'b' {
                i += 1;
            }
            coef = text[start..i].parse().map_err(|_| Error::Syntax {
                offset: start,
                message: format!("invalid number {:?}", &text[start..i]),
            })?;
            skip_ws(&mut i);
            if i < s.len() && s[i] == b'*' {
                i += 1;
                skip_ws(&mut i);
            } else {
                return Err(Error::Syntax {
                    offset: i,
                    message: "expected `*` after a multiplier".into(),
                });
            }
        }
        if i >= s.len() || s[i] != b'b' {
            return Err(Error::Syntax {
                offset: i,
                message: "expected a coefficient reference `b<k>`".into(),
            });
        }
        let kstart = i + 1;
        i = kstart;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        let k: usize = text[kstart..i].parse().map_err(|_| Error::Syntax {
            offset: kstart,
            message: "expected a coefficient index".into(),
        })?;
        if k >= n_coef {
            return Err(Error::InvalidArgument(format!(
                "coefficient b{k} out of range (model has b0..b{})",
                n_coef - 1
            )));
        }
        out[k] += sign * coef;
    }
    Ok(out)
}
