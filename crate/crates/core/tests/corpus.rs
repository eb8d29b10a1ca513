use std::collections::BTreeSet;

use formula_synth::corpus::{
    build_vocabulary, bundled_corpus, detokenize, filter_corpus, normalize, tokenize, tokenize_normalized, DomainLabel,
    FormulaRecord, Token, TokenSequence, Vocabulary, BUNDLED_CORPUS, SPACING_COMMANDS,
};
use formula_synth::image::{RenderParams, RendererBackend, StubRenderer};
use proptest::prelude::*;

/// Straight-line lexer kept independent of the library's tokenizer.
fn scan(line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '\\' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_alphabetic() {
                j += 1;
            }
            if j == i + 1 {
                j += 1;
            }
            out.push(chars[i..j].iter().collect());
            i = j;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out.retain(|t| !SPACING_COMMANDS.contains(&t.as_str()));
    out
}

#[test]
fn bundled_vocabulary_size_matches_independent_scan() {
    let records = bundled_corpus();
    assert!(records.len() >= 200);
    let vocab = build_vocabulary(&records).unwrap();
    let distinct: BTreeSet<String> = BUNDLED_CORPUS.lines().flat_map(scan).collect();
    assert_eq!(vocab.len(), distinct.len() + 4);
}

#[test]
fn bundled_corpus_contains_long_formulas() {
    let records = bundled_corpus();
    assert!(records.iter().filter(|r| r.tokens.len() > 50).count() >= 3);
    assert!(filter_corpus(&records, 50, None).len() < records.len());
}

#[test]
fn retokenized_formulas_render_identically() {
    let stub = StubRenderer;
    let params = RenderParams::default();
    for r in bundled_corpus().iter().take(60) {
        let again = detokenize(r.tokens.tokens());
        let a = stub.render(&r.source_latex, &params).unwrap();
        let b = stub.render(&again, &params).unwrap();
        assert_eq!(a, b, "{} vs {again}", r.source_latex);
    }
}

#[test]
fn filter_length_boundary() {
    let make = |n: usize| FormulaRecord::new(format!("n{n}"), vec!["a"; n].join(" "), DomainLabel::Rendered).unwrap();
    let kept = filter_corpus(&[make(50), make(51)], 50, None);
    assert_eq!(kept.iter().map(|r| r.tokens.len()).collect::<Vec<_>>(), vec![50]);
}

#[test]
fn whitelist_excludes_unknown_letters() {
    let with_d = FormulaRecord::new("d", "D + x", DomainLabel::Handwritten).unwrap();
    let without = FormulaRecord::new("x", "x + x", DomainLabel::Handwritten).unwrap();
    let whitelist: BTreeSet<Token> = ["x", "+"].iter().map(|t| Token::new(*t).unwrap()).collect();
    let kept = filter_corpus(&[with_d, without.clone()], 50, Some(&whitelist));
    assert_eq!(kept, vec![without]);
}

fn token_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9]".prop_map(String::from),
        Just("+".to_string()),
        Just("^".to_string()),
        Just("_".to_string()),
        Just("=".to_string()),
        Just("\\frac".to_string()),
        Just("\\alpha".to_string()),
        Just("\\sin".to_string()),
        Just("\\{".to_string()),
        Just("\\,".to_string()),
        Just("\\quad".to_string()),
        Just("~".to_string()),
        Just("\\;".to_string()),
    ]
}

fn balanced_latex() -> impl Strategy<Value = String> {
    let leaf = prop::collection::vec(token_text(), 0..6).prop_map(|v| v.join(" "));
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop::collection::vec(inner, 1..4).prop_map(|parts| parts.iter().map(|p| format!("{{{p}}}")).collect::<Vec<_>>().join(""))
    })
}

proptest! {
    #[test]
    fn normalize_is_idempotent(latex in balanced_latex()) {
        let once = normalize(&tokenize(&latex).unwrap());
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert!(once.iter().all(|t| !t.is_spacing()));
    }

    #[test]
    fn detokenize_round_trip_is_a_fixed_point(latex in balanced_latex()) {
        let seq = tokenize(&latex).unwrap();
        let again = tokenize(&detokenize(seq.tokens())).unwrap();
        prop_assert_eq!(again, seq);
    }

    #[test]
    fn tokenizer_agrees_with_independent_scan(latex in balanced_latex()) {
        let ours: Vec<String> = tokenize_normalized(&latex).unwrap().texts().iter().map(|s| s.to_string()).collect();
        prop_assert_eq!(ours, scan(&latex));
    }

    #[test]
    fn filter_is_an_ordered_subsequence(lens in prop::collection::vec(1usize..12, 0..20), k in 0usize..12) {
        let records: Vec<FormulaRecord> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| FormulaRecord::new(format!("r{i}"), vec!["x"; n].join(" "), DomainLabel::Rendered).unwrap())
            .collect();
        let kept = filter_corpus(&records, k, None);
        let mut it = records.iter();
        for r in &kept {
            prop_assert!(r.tokens.len() <= k);
            prop_assert!(it.any(|o| o == r));
        }
        prop_assert_eq!(kept.len(), lens.iter().filter(|&&n| n <= k).count());
    }

    #[test]
    fn vocabulary_round_trips_ids(texts in prop::collection::btree_set(token_text(), 1..12)) {
        let tokens: Vec<Token> = texts.iter().map(|t| Token::new(t.as_str()).unwrap()).collect();
        let vocab = Vocabulary::from_tokens(tokens.iter());
        for id in 0..vocab.len() {
            let text = vocab.id_to_token(id).unwrap();
            prop_assert_eq!(vocab.token_to_id(text), Some(id));
        }
        let back = Vocabulary::from_text(&vocab.to_text()).unwrap();
        prop_assert_eq!(back, vocab.clone());
        let seq = TokenSequence::new(tokens.clone());
        prop_assert_eq!(vocab.decode(&vocab.encode(&seq)), seq);
    }
}
