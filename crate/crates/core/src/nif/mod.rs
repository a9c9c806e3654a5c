//! NIF stand-off annotation documents in turtle serialization.
//!
//! A document is one `nif:Context` (the full text) plus entity annotations
//! anchored by code-point offsets. Offsets follow RFC 5147 character
//! semantics: they count Unicode scalar values, not bytes.

mod turtle;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::report::ValidationReport;
use turtle::{parse_triples, Term, Triple, RDF_TYPE};

pub const NIF_NS: &str = "http://persistence.uni-leipzig.org/nlp2rdf/ontologies/nif-core#";
pub const XSD_NS: &str = "http://www.w3.org/2001/XMLSchema#";
pub const ITSRDF_NS: &str = "http://www.w3.org/2005/11/its/rdf#";
pub const RDF_NS: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#";
pub const RDFS_NS: &str = "http://www.w3.org/2000/01/rdf-schema#";

pub const TURTLE_MEDIA_TYPE: &str = "text/turtle";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NifError {
    #[error("offsets [{begin},{end}) invalid for context of length {len}")]
    Offset {
        begin: usize,
        end: usize,
        len: usize,
    },
    #[error("turtle syntax error at {line}:{col}: {message}")]
    Parse {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("invalid NIF model: {0}")]
    Model(String),
    #[error("documents do not share the same context")]
    ContextMismatch,
    #[error("nothing to merge")]
    EmptyMerge,
}

/// An entity annotation over a span of the context. Ordering (and hence
/// serialization order) is by `(begin, end, entity_class, ident_ref)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Annotation {
    #[serde(rename = "beginIndex")]
    pub begin: usize,
    #[serde(rename = "endIndex")]
    pub end: usize,
    pub entity_class: String,
    pub ident_ref: Option<String>,
    pub anchor_of: String,
}

impl Annotation {
    fn key(&self) -> (usize, usize, &str, Option<&str>) {
        (
            self.begin,
            self.end,
            &self.entity_class,
            self.ident_ref.as_deref(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NifDocument {
    pub base_uri: String,
    pub context_text: String,
    pub begin_index: usize,
    pub end_index: usize,
    pub annotations: BTreeSet<Annotation>,
}

/// Substring by code-point offsets, `None` when out of range.
pub fn char_slice(s: &str, begin: usize, end: usize) -> Option<&str> {
    if begin > end {
        return None;
    }
    let mut indices = s
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(s.len()));
    let start = indices.nth(begin)?;
    let stop = if end == begin {
        start
    } else {
        indices.nth(end - begin - 1)?
    };
    Some(&s[start..stop])
}

pub fn make_context(text: &str, base_uri: &str) -> NifDocument {
    NifDocument {
        base_uri: base_uri.to_string(),
        context_text: text.to_string(),
        begin_index: 0,
        end_index: text.chars().count(),
        annotations: BTreeSet::new(),
    }
}

impl NifDocument {
    pub fn context_uri(&self) -> String {
        format!(
            "{}#char={},{}",
            self.base_uri, self.begin_index, self.end_index
        )
    }

    /// Text covered by absolute offsets `[begin, end)`.
    pub fn span(&self, begin: usize, end: usize) -> Option<&str> {
        if begin < self.begin_index {
            return None;
        }
        char_slice(
            &self.context_text,
            begin - self.begin_index,
            end.checked_sub(self.begin_index)?,
        )
    }

    /// Returns a copy with one more annotation; `anchor_of` is taken from the
    /// context. Adding an annotation that is already present is a no-op.
    pub fn annotate(
        &self,
        begin: usize,
        end: usize,
        entity_class: &str,
        ident_ref: Option<&str>,
    ) -> Result<NifDocument, NifError> {
        let offset_err = || NifError::Offset {
            begin,
            end,
            len: self.end_index,
        };
        if begin >= end || end > self.end_index || begin < self.begin_index {
            return Err(offset_err());
        }
        let anchor = self.span(begin, end).ok_or_else(offset_err)?;
        let mut doc = self.clone();
        doc.annotations.insert(Annotation {
            begin,
            end,
            entity_class: entity_class.to_string(),
            ident_ref: ident_ref.map(str::to_string),
            anchor_of: anchor.to_string(),
        });
        Ok(doc)
    }

    /// Whether two documents have the same context node.
    pub fn same_context(&self, other: &NifDocument) -> bool {
        self.base_uri == other.base_uri
            && self.context_text == other.context_text
            && self.begin_index == other.begin_index
            && self.end_index == other.end_index
    }

    pub fn to_turtle(&self) -> String {
        serialize_nif(self)
    }
}

/// Union of the annotation sets of documents over the same context.
/// Annotations are deduplicated on `(begin, end, entity_class, ident_ref)`.
pub fn merge(docs: &[NifDocument]) -> Result<NifDocument, NifError> {
    let (first, rest) = docs.split_first().ok_or(NifError::EmptyMerge)?;
    if rest.iter().any(|d| !d.same_context(first)) {
        return Err(NifError::ContextMismatch);
    }
    let mut out = first.clone();
    let mut keys: BTreeSet<_> = first.annotations.iter().map(|a| a.key()).collect();
    for a in rest.iter().flat_map(|d| &d.annotations) {
        if keys.insert(a.key()) {
            out.annotations.insert(a.clone());
        }
    }
    Ok(out)
}

fn iri_is_safe(s: &str) -> bool {
    !s.is_empty()
        && !s.chars().any(|c| {
            c.is_whitespace()
                || c.is_control()
                || matches!(c, '<' | '>' | '"' | '{' | '}' | '|' | '^' | '`' | '\\')
        })
}

/// Checks every structural invariant of a document; each finding's path
/// names the offending field.
pub fn validate_doc(doc: &NifDocument) -> ValidationReport {
    let mut report = ValidationReport::new();
    if !iri_is_safe(&doc.base_uri) || doc.base_uri.contains('#') {
        report.error(
            "baseUri",
            format!(
                "{:?} is not usable as a fragment-free IRI prefix",
                doc.base_uri
            ),
        );
    }
    let len = doc.context_text.chars().count();
    if doc.end_index < doc.begin_index || doc.end_index - doc.begin_index != len {
        report.error(
            "endIndex",
            format!(
                "context [{},{}) does not span the {len} code points of isString",
                doc.begin_index, doc.end_index
            ),
        );
    }
    for (i, a) in doc.annotations.iter().enumerate() {
        let path = format!("annotations[{i}]");
        if a.begin >= a.end {
            report.error(
                format!("{path}.beginIndex"),
                format!("beginIndex {} must be below endIndex {}", a.begin, a.end),
            );
        }
        if a.begin < doc.begin_index {
            report.error(
                format!("{path}.beginIndex"),
                format!("beginIndex {} precedes the context", a.begin),
            );
        }
        if a.end > doc.end_index {
            report.error(
                format!("{path}.endIndex"),
                format!(
                    "endIndex {} exceeds context endIndex {}",
                    a.end, doc.end_index
                ),
            );
        }
        if a.begin < a.end {
            match doc.span(a.begin, a.end) {
                Some(s) if s == a.anchor_of => {}
                Some(s) => report.error(
                    format!("{path}.anchorOf"),
                    format!(
                        "anchorOf {:?} differs from context text {s:?} at [{},{})",
                        a.anchor_of, a.begin, a.end
                    ),
                ),
                None => report.error(
                    format!("{path}.anchorOf"),
                    format!("span [{},{}) lies outside the context text", a.begin, a.end),
                ),
            }
        }
        if !iri_is_safe(&a.entity_class) {
            report.error(
                format!("{path}.entityClass"),
                format!("{:?} is not a valid IRI", a.entity_class),
            );
        }
        if let Some(r) = &a.ident_ref {
            if !iri_is_safe(r) {
                report.error(
                    format!("{path}.identRef"),
                    format!("{r:?} is not a valid IRI"),
                );
            }
        }
    }
    report
}

fn escape_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

/// Deterministic turtle rendering: prefixes, the context block, then one
/// block per annotation in annotation order.
pub fn serialize_nif(doc: &NifDocument) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "@prefix nif: <{NIF_NS}> .");
    let _ = writeln!(out, "@prefix xsd: <{XSD_NS}> .");
    let _ = writeln!(out, "@prefix itsrdf: <{ITSRDF_NS}> .");
    let ctx = doc.context_uri();
    let _ = write!(
        out,
        "\n<{ctx}>\n    a nif:RFC5147String, nif:String, nif:Context ;\n    \
         nif:beginIndex \"{}\"^^xsd:nonNegativeInteger ;\n    \
         nif:endIndex \"{}\"^^xsd:nonNegativeInteger ;\n    \
         nif:isString \"{}\"^^xsd:string .\n",
        doc.begin_index,
        doc.end_index,
        escape_literal(&doc.context_text)
    );

    // Several annotations may cover the same span, possibly the context's
    // own; each needs its own subject so the parser can pair entity and
    // identity unambiguously.
    let mut span_uses: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    span_uses.insert((doc.begin_index, doc.end_index), 1);
    for a in &doc.annotations {
        let n = span_uses.entry((a.begin, a.end)).or_insert(0);
        *n += 1;
        let subject = if *n == 1 {
            format!("{}#char={},{}", doc.base_uri, a.begin, a.end)
        } else {
            format!(
                "{}#char={},{}&annotation={}",
                doc.base_uri, a.begin, a.end, n
            )
        };
        let _ = write!(
            out,
            "\n<{subject}>\n    a nif:RFC5147String, nif:String ;\n    \
             nif:anchorOf \"{}\"^^xsd:string ;\n    \
             nif:beginIndex \"{}\"^^xsd:nonNegativeInteger ;\n    \
             nif:endIndex \"{}\"^^xsd:nonNegativeInteger ;\n    \
             nif:entity <{}> ;\n    \
             nif:referenceContext <{ctx}>",
            escape_literal(&a.anchor_of),
            a.begin,
            a.end,
            a.entity_class
        );
        if let Some(r) = &a.ident_ref {
            let _ = write!(out, " ;\n    itsrdf:taIdentRef <{r}>");
        }
        out.push_str(" .\n");
    }
    out
}

fn nif(local: &str) -> String {
    format!("{NIF_NS}{local}")
}

struct Subject<'a> {
    id: &'a Term,
    props: BTreeMap<&'a str, Vec<&'a Term>>,
}

impl<'a> Subject<'a> {
    fn label(&self) -> String {
        match self.id {
            Term::Iri(i) => format!("<{i}>"),
            Term::Blank(b) => format!("_:{b}"),
            Term::Literal { value, .. } => format!("{value:?}"),
        }
    }

    fn values(&self, predicate: &str) -> &[&'a Term] {
        self.props.get(predicate).map(Vec::as_slice).unwrap_or(&[])
    }

    fn single(&self, predicate: &str, name: &str) -> Result<Option<&'a Term>, NifError> {
        match self.values(predicate) {
            [] => Ok(None),
            [one] => Ok(Some(one)),
            _ => Err(NifError::Model(format!(
                "{} has more than one {name}",
                self.label()
            ))),
        }
    }

    fn required(&self, predicate: &str, name: &str) -> Result<&'a Term, NifError> {
        self.single(predicate, name)?
            .ok_or_else(|| NifError::Model(format!("{} lacks {name}", self.label())))
    }

    fn string(&self, predicate: &str, name: &str) -> Result<String, NifError> {
        match self.required(predicate, name)? {
            Term::Literal { value, .. } => Ok(value.clone()),
            _ => Err(NifError::Model(format!(
                "{name} of {} must be a literal",
                self.label()
            ))),
        }
    }

    fn index(&self, predicate: &str, name: &str) -> Result<usize, NifError> {
        let raw = self.string(predicate, name)?;
        raw.trim_start_matches('+').parse().map_err(|_| {
            NifError::Model(format!(
                "{name} {raw:?} of {} is not a non-negative integer",
                self.label()
            ))
        })
    }

    fn iri(&self, predicate: &str, name: &str) -> Result<Option<String>, NifError> {
        match self.single(predicate, name)? {
            None => Ok(None),
            Some(Term::Iri(i)) => Ok(Some(i.clone())),
            Some(_) => Err(NifError::Model(format!(
                "{name} of {} must be an IRI",
                self.label()
            ))),
        }
    }

    fn has_type(&self, class: &str) -> bool {
        self.values(RDF_TYPE)
            .iter()
            .any(|t| matches!(t, Term::Iri(i) if i == class))
    }
}

fn group_subjects(triples: &[Triple]) -> Vec<Subject<'_>> {
    let mut subjects: Vec<Subject<'_>> = Vec::new();
    let mut index: HashMap<&Term, usize> = HashMap::new();
    for t in triples {
        let idx = *index.entry(&t.subject).or_insert_with(|| {
            subjects.push(Subject {
                id: &t.subject,
                props: BTreeMap::new(),
            });
            subjects.len() - 1
        });
        subjects[idx]
            .props
            .entry(&t.predicate)
            .or_default()
            .push(&t.object);
    }
    subjects
}

/// Parses a turtle NIF document: exactly one `nif:Context` and any number of
/// annotations referencing it. The result satisfies [`validate_doc`].
pub fn parse_nif(text: &str) -> Result<NifDocument, NifError> {
    let triples = parse_triples(text)?;
    let subjects = group_subjects(&triples);

    let context_class = nif("Context");
    let contexts: Vec<&Subject<'_>> = subjects
        .iter()
        .filter(|s| s.has_type(&context_class))
        .collect();
    let ctx = match contexts.as_slice() {
        [one] => *one,
        [] => return Err(NifError::Model("no nif:Context found".into())),
        _ => {
            return Err(NifError::Model(format!(
                "{} nif:Context nodes found, expected one",
                contexts.len()
            )))
        }
    };
    let Term::Iri(ctx_uri) = ctx.id else {
        return Err(NifError::Model("context must be named by an IRI".into()));
    };

    let context_text = ctx.string(&nif("isString"), "nif:isString")?;
    let begin_index = ctx.index(&nif("beginIndex"), "nif:beginIndex")?;
    let end_index = ctx.index(&nif("endIndex"), "nif:endIndex")?;
    let Some(hash) = ctx_uri.rfind("#char=") else {
        return Err(NifError::Model(format!(
            "context IRI <{ctx_uri}> lacks a #char= fragment"
        )));
    };
    let base_uri = ctx_uri[..hash].to_string();
    let expected = format!("{base_uri}#char={begin_index},{end_index}");
    if *ctx_uri != expected {
        return Err(NifError::Model(format!(
            "context IRI <{ctx_uri}> does not match its offsets (expected <{expected}>)"
        )));
    }

    let mut doc = NifDocument {
        base_uri,
        context_text,
        begin_index,
        end_index,
        annotations: BTreeSet::new(),
    };

    let reference = nif("referenceContext");
    for s in subjects.iter().filter(|s| !std::ptr::eq(*s, ctx)) {
        let Some(target) = s.iri(&reference, "nif:referenceContext")? else {
            continue;
        };
        if target != *ctx_uri {
            return Err(NifError::Model(format!(
                "{} references unknown context <{target}>",
                s.label()
            )));
        }
        let entity_class = s
            .iri(&nif("entity"), "nif:entity")?
            .ok_or_else(|| NifError::Model(format!("{} lacks nif:entity", s.label())))?;
        doc.annotations.insert(Annotation {
            begin: s.index(&nif("beginIndex"), "nif:beginIndex")?,
            end: s.index(&nif("endIndex"), "nif:endIndex")?,
            entity_class,
            ident_ref: s.iri(&format!("{ITSRDF_NS}taIdentRef"), "itsrdf:taIdentRef")?,
            anchor_of: s.string(&nif("anchorOf"), "nif:anchorOf")?,
        });
    }

    let report = validate_doc(&doc);
    if report.has_errors() {
        return Err(NifError::Model(report.to_string()));
    }
    Ok(doc)
}
