//! Generators of valid NIF documents and the property checks run on them.

use std::collections::BTreeSet;

use cwm_core::nif::{
    make_context, merge, parse_nif, serialize_nif, validate_doc, Annotation, NifDocument,
};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{BASE, GND, LOC, PER};

pub const CLASSES: [&str; 3] = [PER, LOC, "http://example.org/ORG"];
pub const IDENTS: [Option<&str>; 3] = [None, Some(GND), Some("http://example.org/id/x")];

pub fn text() -> impl Strategy<Value = String> {
    // Includes multi-byte characters and everything turtle must escape.
    prop::collection::vec(
        prop_oneof![
            8 => prop::char::range('a', 'z'),
            2 => Just(' '),
            1 => prop::sample::select(vec!['"', '\\', '\n', '\t', '\r', 'ü', 'ß', '東', '😀', '\'', '#', '<', '>']),
        ],
        0..60,
    )
    .prop_map(|c| c.into_iter().collect())
}

pub fn doc() -> impl Strategy<Value = NifDocument> {
    (
        text(),
        prop::sample::select(vec![BASE, "http://example.org/doc/", "urn:example:d"]),
        0usize..20,
    )
        .prop_flat_map(|(text, base, offset)| {
            let len = text.chars().count();
            let spans = if len == 0 {
                Just(Vec::new()).boxed()
            } else {
                prop::collection::vec(((0..len), (1..=len), 0..3usize, 0..3usize), 0..8).boxed()
            };
            (Just(text), Just(base), Just(offset), spans)
        })
        .prop_map(|(text, base, offset, spans)| {
            let mut d = make_context(&text, base);
            d.begin_index = offset;
            d.end_index += offset;
            for (a, b, c, i) in spans {
                let (begin, end) = (a.min(b), a.max(b));
                if begin == end {
                    continue;
                }
                d = d
                    .annotate(begin + offset, end + offset, CLASSES[c], IDENTS[i])
                    .unwrap();
            }
            d
        })
}

/// Documents sharing one context.
pub fn same_context_docs(n: usize) -> impl Strategy<Value = Vec<NifDocument>> {
    doc()
        .prop_flat_map(move |base| {
            let len = base.context_text.chars().count();
            let ctx = NifDocument {
                annotations: BTreeSet::new(),
                ..base
            };
            let spans = if len == 0 {
                Just(Vec::new()).boxed()
            } else {
                prop::collection::vec(
                    prop::collection::vec(((0..len), (1..=len), 0..3usize, 0..3usize), 0..6),
                    n,
                )
                .boxed()
            };
            (Just(ctx), spans)
        })
        .prop_map(move |(ctx, spans)| {
            if spans.is_empty() {
                return vec![ctx; n];
            }
            spans
                .into_iter()
                .map(|list| {
                    let mut d = ctx.clone();
                    for (a, b, c, i) in list {
                        let (begin, end) = (a.min(b), a.max(b));
                        if begin < end {
                            let off = d.begin_index;
                            d = d
                                .annotate(begin + off, end + off, CLASSES[c], IDENTS[i])
                                .unwrap();
                        }
                    }
                    d
                })
                .collect()
        })
}

/// Brute force: concatenate, sort, dedup.
pub fn union(docs: &[&NifDocument]) -> Vec<Annotation> {
    let mut all: Vec<Annotation> = docs
        .iter()
        .flat_map(|d| d.annotations.iter().cloned())
        .collect();
    all.sort();
    all.dedup();
    all
}

pub fn annotations(d: &NifDocument) -> Vec<Annotation> {
    d.annotations.iter().cloned().collect()
}

pub fn check_round_trip(d: &NifDocument) -> Result<(), TestCaseError> {
    prop_assert!(validate_doc(d).is_empty(), "{}", validate_doc(d));
    let text = serialize_nif(d);
    let back = parse_nif(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
    prop_assert_eq!(&back, d);
    Ok(())
}

/// Union oracle, identity, commutativity and associativity on three
/// documents sharing a context.
pub fn check_merge(docs: &[NifDocument]) -> Result<(), TestCaseError> {
    let (a, b, c) = (&docs[0], &docs[1], &docs[2]);
    let m = |x: &[NifDocument]| merge(x).unwrap();

    prop_assert_eq!(annotations(&m(docs)), union(&[a, b, c]));
    prop_assert_eq!(&m(std::slice::from_ref(a)), a);
    let empty = NifDocument {
        annotations: BTreeSet::new(),
        ..a.clone()
    };
    prop_assert_eq!(&m(&[a.clone(), empty]), a);
    prop_assert_eq!(m(&[a.clone(), b.clone()]), m(&[b.clone(), a.clone()]));
    let left = m(&[m(&[a.clone(), b.clone()]), c.clone()]);
    let right = m(&[a.clone(), m(&[b.clone(), c.clone()])]);
    prop_assert_eq!(left, right);
    Ok(())
}
