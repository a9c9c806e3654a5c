//! Tokenizer and parser for the turtle subset used by NIF documents:
//! `@prefix`/`PREFIX` and `@base`/`BASE` directives, IRIs, prefixed names,
//! blank node labels, `a`, predicate-object lists with `;` and `,`, and
//! string literals with optional datatype or language tag. Collections,
//! `[ ... ]` property lists and non-integer numerics are not supported.

use std::collections::HashMap;
use std::iter::Peekable;
use std::str::Chars;

use super::{ITSRDF_NS, NIF_NS, RDFS_NS, RDF_NS, XSD_NS};
use crate::nif::NifError;

pub(crate) const RDF_TYPE: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) enum Term {
    Iri(String),
    Blank(String),
    Literal {
        value: String,
        datatype: Option<String>,
        lang: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Triple {
    pub subject: Term,
    pub predicate: String,
    pub object: Term,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Iri(String),
    PName(String, String),
    Blank(String),
    Str(String),
    Integer(String),
    LangTag(String),
    DataTypeMarker,
    A,
    Dot,
    Semicolon,
    Comma,
    AtPrefix,
    AtBase,
    Word(String),
}

struct Lexer<'a> {
    chars: Peekable<Chars<'a>>,
    line: usize,
    col: usize,
}

fn err(line: usize, col: usize, message: impl Into<String>) -> NifError {
    NifError::Parse {
        line,
        col,
        message: message.into(),
    }
}

fn is_pn_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.')
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            chars: text.chars().peekable(),
            line: 1,
            col: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == '#' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn next_token(&mut self) -> Result<Option<(Tok, usize, usize)>, NifError> {
        self.skip_ws();
        let (line, col) = (self.line, self.col);
        let Some(c) = self.peek() else {
            return Ok(None);
        };
        let tok = match c {
            '<' => {
                self.bump();
                let mut iri = String::new();
                loop {
                    match self.bump() {
                        Some('>') => break,
                        Some('\\') => iri.push(self.unicode_escape(line, col)?),
                        Some(c) if c.is_whitespace() || c == '"' || c == '<' => {
                            return Err(err(line, col, "illegal character in IRI"))
                        }
                        Some(c) => iri.push(c),
                        None => return Err(err(line, col, "unterminated IRI")),
                    }
                }
                Tok::Iri(iri)
            }
            '"' | '\'' => Tok::Str(self.string_literal(line, col)?),
            '.' => {
                self.bump();
                Tok::Dot
            }
            ';' => {
                self.bump();
                Tok::Semicolon
            }
            ',' => {
                self.bump();
                Tok::Comma
            }
            '^' => {
                self.bump();
                if self.bump() != Some('^') {
                    return Err(err(line, col, "expected '^^'"));
                }
                Tok::DataTypeMarker
            }
            '@' => {
                self.bump();
                let word = self.take_while(|c| c.is_ascii_alphanumeric() || c == '-');
                match word.as_str() {
                    "prefix" => Tok::AtPrefix,
                    "base" => Tok::AtBase,
                    "" => return Err(err(line, col, "empty language tag")),
                    _ => Tok::LangTag(word),
                }
            }
            '_' => {
                self.bump();
                if self.bump() != Some(':') {
                    return Err(err(line, col, "expected ':' after '_' in blank node"));
                }
                let label = self.name_chars();
                if label.is_empty() {
                    return Err(err(line, col, "empty blank node label"));
                }
                Tok::Blank(label)
            }
            c if c.is_ascii_digit() || c == '+' || c == '-' => {
                let mut n = String::new();
                n.push(self.bump().unwrap_or(c));
                n.push_str(&self.take_while(|c| c.is_ascii_digit()));
                if !n.chars().any(|c| c.is_ascii_digit()) {
                    return Err(err(line, col, "malformed number"));
                }
                Tok::Integer(n)
            }
            c if c.is_alphabetic() || c == ':' => {
                let prefix = self.take_while(|c| c.is_alphanumeric() || c == '_' || c == '-');
                if self.peek() == Some(':') {
                    self.bump();
                    let local = self.name_chars();
                    Tok::PName(prefix, local)
                } else if prefix == "a" {
                    Tok::A
                } else {
                    Tok::Word(prefix)
                }
            }
            other => return Err(err(line, col, format!("unexpected character {other:?}"))),
        };
        Ok(Some((tok, line, col)))
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            s.push(c);
            self.bump();
        }
        s
    }

    /// Local part of a prefixed name or a blank node label. A trailing `.`
    /// terminates the statement rather than belonging to the name.
    fn name_chars(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c == '.' {
                // Look past the dot: it is part of the name only if a name
                // character follows.
                let mut ahead = self.chars.clone();
                ahead.next();
                match ahead.peek() {
                    Some(&n) if is_pn_char(n) || n == ':' => {}
                    _ => break,
                }
            } else if !(is_pn_char(c) || c == ':' || c == '%') {
                break;
            }
            s.push(c);
            self.bump();
        }
        s
    }

    fn unicode_escape(&mut self, line: usize, col: usize) -> Result<char, NifError> {
        let width = match self.bump() {
            Some('u') => 4,
            Some('U') => 8,
            _ => return Err(err(line, col, "invalid escape in IRI")),
        };
        self.hex_char(width, line, col)
    }

    fn hex_char(&mut self, width: usize, line: usize, col: usize) -> Result<char, NifError> {
        let mut code = 0u32;
        for _ in 0..width {
            let d = self
                .bump()
                .and_then(|c| c.to_digit(16))
                .ok_or_else(|| err(line, col, "invalid hex digit in escape"))?;
            code = code * 16 + d;
        }
        char::from_u32(code).ok_or_else(|| err(line, col, "escape is not a valid code point"))
    }

    fn string_literal(&mut self, line: usize, col: usize) -> Result<String, NifError> {
        let quote = self.bump().unwrap_or('"');
        let mut long = false;
        if self.peek() == Some(quote) {
            self.bump();
            if self.peek() == Some(quote) {
                self.bump();
                long = true;
            } else {
                return Ok(String::new());
            }
        }
        let mut out = String::new();
        loop {
            let Some(c) = self.bump() else {
                return Err(err(line, col, "unterminated string literal"));
            };
            match c {
                '\\' => {
                    let e = match self.bump() {
                        Some('t') => '\t',
                        Some('b') => '\u{8}',
                        Some('n') => '\n',
                        Some('r') => '\r',
                        Some('f') => '\u{c}',
                        Some('"') => '"',
                        Some('\'') => '\'',
                        Some('\\') => '\\',
                        Some('u') => self.hex_char(4, line, col)?,
                        Some('U') => self.hex_char(8, line, col)?,
                        _ => return Err(err(line, col, "invalid escape sequence")),
                    };
                    out.push(e);
                }
                c if c == quote && !long => return Ok(out),
                c if c == quote => {
                    let mut ahead = self.chars.clone();
                    if ahead.next() == Some(quote) && ahead.next() == Some(quote) {
                        self.bump();
                        self.bump();
                        return Ok(out);
                    }
                    out.push(c);
                }
                '\n' | '\r' if !long => {
                    return Err(err(line, col, "newline in short string literal"))
                }
                c => out.push(c),
            }
        }
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    lookahead: Option<(Tok, usize, usize)>,
    prefixes: HashMap<String, String>,
    base: Option<String>,
    triples: Vec<Triple>,
}

/// Parses turtle text into triples. The `nif`, `xsd`, `itsrdf`, `rdf` and
/// `rdfs` prefixes resolve to their usual namespaces unless redeclared.
pub(crate) fn parse_triples(text: &str) -> Result<Vec<Triple>, NifError> {
    let prefixes = [
        ("nif", NIF_NS),
        ("xsd", XSD_NS),
        ("itsrdf", ITSRDF_NS),
        ("rdf", RDF_NS),
        ("rdfs", RDFS_NS),
    ]
    .into_iter()
    .map(|(p, ns)| (p.to_string(), ns.to_string()))
    .collect();
    let mut parser = Parser {
        lexer: Lexer::new(text),
        lookahead: None,
        prefixes,
        base: None,
        triples: Vec::new(),
    };
    parser.document()?;
    Ok(parser.triples)
}

impl Parser<'_> {
    fn peek(&mut self) -> Result<Option<&Tok>, NifError> {
        if self.lookahead.is_none() {
            self.lookahead = self.lexer.next_token()?;
        }
        Ok(self.lookahead.as_ref().map(|(t, _, _)| t))
    }

    fn next(&mut self) -> Result<(Tok, usize, usize), NifError> {
        self.peek()?;
        self.lookahead
            .take()
            .ok_or_else(|| err(self.lexer.line, self.lexer.col, "unexpected end of input"))
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), NifError> {
        let (tok, line, col) = self.next()?;
        if tok != want {
            return Err(err(line, col, format!("expected {what}, found {tok:?}")));
        }
        Ok(())
    }

    fn document(&mut self) -> Result<(), NifError> {
        while let Some(tok) = self.peek()? {
            match tok {
                Tok::AtPrefix => {
                    self.next()?;
                    self.prefix_decl()?;
                    self.expect(Tok::Dot, "'.' after @prefix")?;
                }
                Tok::AtBase => {
                    self.next()?;
                    self.base_decl()?;
                    self.expect(Tok::Dot, "'.' after @base")?;
                }
                Tok::Word(w) if w.eq_ignore_ascii_case("prefix") => {
                    self.next()?;
                    self.prefix_decl()?;
                }
                Tok::Word(w) if w.eq_ignore_ascii_case("base") => {
                    self.next()?;
                    self.base_decl()?;
                }
                _ => {
                    self.statement()?;
                }
            }
        }
        Ok(())
    }

    fn prefix_decl(&mut self) -> Result<(), NifError> {
        let (tok, line, col) = self.next()?;
        let Tok::PName(prefix, local) = tok else {
            return Err(err(line, col, "expected prefix name"));
        };
        if !local.is_empty() {
            return Err(err(line, col, "prefix declaration must end with ':'"));
        }
        let (tok, line, col) = self.next()?;
        let Tok::Iri(iri) = tok else {
            return Err(err(line, col, "expected namespace IRI"));
        };
        let iri = self.resolve(iri);
        self.prefixes.insert(prefix, iri);
        Ok(())
    }

    fn base_decl(&mut self) -> Result<(), NifError> {
        let (tok, line, col) = self.next()?;
        let Tok::Iri(iri) = tok else {
            return Err(err(line, col, "expected base IRI"));
        };
        self.base = Some(self.resolve(iri));
        Ok(())
    }

    fn resolve(&self, iri: String) -> String {
        let has_scheme = iri.find(':').is_some_and(|i| {
            iri[..i]
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
                && i > 0
        });
        match (&self.base, has_scheme) {
            (Some(base), false) => url::Url::parse(base)
                .and_then(|b| b.join(&iri))
                .map(|u| u.to_string())
                .unwrap_or(iri),
            _ => iri,
        }
    }

    fn expand(
        &self,
        prefix: &str,
        local: &str,
        line: usize,
        col: usize,
    ) -> Result<String, NifError> {
        self.prefixes
            .get(prefix)
            .map(|ns| format!("{ns}{local}"))
            .ok_or_else(|| err(line, col, format!("undeclared prefix {prefix:?}")))
    }

    fn statement(&mut self) -> Result<(), NifError> {
        let (tok, line, col) = self.next()?;
        let subject = match tok {
            Tok::Iri(i) => Term::Iri(self.resolve(i)),
            Tok::PName(p, l) => Term::Iri(self.expand(&p, &l, line, col)?),
            Tok::Blank(b) => Term::Blank(b),
            other => return Err(err(line, col, format!("expected subject, found {other:?}"))),
        };
        loop {
            let predicate = self.verb()?;
            loop {
                let object = self.object()?;
                self.triples.push(Triple {
                    subject: subject.clone(),
                    predicate: predicate.clone(),
                    object,
                });
                if self.peek()? == Some(&Tok::Comma) {
                    self.next()?;
                } else {
                    break;
                }
            }
            match self.next()? {
                (Tok::Dot, _, _) => return Ok(()),
                (Tok::Semicolon, _, _) => {
                    // Repeated or trailing semicolons are allowed.
                    while self.peek()? == Some(&Tok::Semicolon) {
                        self.next()?;
                    }
                    if self.peek()? == Some(&Tok::Dot) {
                        self.next()?;
                        return Ok(());
                    }
                }
                (other, line, col) => {
                    return Err(err(
                        line,
                        col,
                        format!("expected ';' or '.', found {other:?}"),
                    ))
                }
            }
        }
    }

    fn verb(&mut self) -> Result<String, NifError> {
        let (tok, line, col) = self.next()?;
        match tok {
            Tok::A => Ok(RDF_TYPE.to_string()),
            Tok::Iri(i) => Ok(self.resolve(i)),
            Tok::PName(p, l) => self.expand(&p, &l, line, col),
            other => Err(err(
                line,
                col,
                format!("expected predicate, found {other:?}"),
            )),
        }
    }

    fn object(&mut self) -> Result<Term, NifError> {
        let (tok, line, col) = self.next()?;
        match tok {
            Tok::Iri(i) => Ok(Term::Iri(self.resolve(i))),
            Tok::PName(p, l) => Ok(Term::Iri(self.expand(&p, &l, line, col)?)),
            Tok::Blank(b) => Ok(Term::Blank(b)),
            Tok::Integer(n) => Ok(Term::Literal {
                value: n,
                datatype: Some(format!("{XSD_NS}integer")),
                lang: None,
            }),
            Tok::Word(w) if w == "true" || w == "false" => Ok(Term::Literal {
                value: w,
                datatype: Some(format!("{XSD_NS}boolean")),
                lang: None,
            }),
            Tok::Str(value) => {
                let (mut datatype, mut lang) = (None, None);
                match self.peek()? {
                    Some(Tok::DataTypeMarker) => {
                        self.next()?;
                        let (tok, line, col) = self.next()?;
                        datatype = Some(match tok {
                            Tok::Iri(i) => self.resolve(i),
                            Tok::PName(p, l) => self.expand(&p, &l, line, col)?,
                            other => {
                                return Err(err(
                                    line,
                                    col,
                                    format!("expected datatype, found {other:?}"),
                                ))
                            }
                        });
                    }
                    Some(Tok::LangTag(_)) => {
                        if let (Tok::LangTag(l), _, _) = self.next()? {
                            lang = Some(l);
                        }
                    }
                    _ => {}
                }
                Ok(Term::Literal {
                    value,
                    datatype,
                    lang,
                })
            }
            other => Err(err(line, col, format!("expected object, found {other:?}"))),
        }
    }
}
