mod common;

use common::*;
use hiddenscope_core::linearity::{FitMode, NonlinearityMatrix};
use hiddenscope_core::token_analysis::{
    aggregate_by_class, apply_removal, classify_word, linearity_context_correlation, pearson,
    student_t_two_sided, token_classes, RemovalPolicy, TokenClass, STOPWORDS_EN,
};
use hiddenscope_core::{Token, TokenTable};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

const STOPWORDS_SHA256: &str = "019f104ba2ed07436d05f9cdd3383034ad66014edc27fc651f837e1a038b6451";

#[derive(Deserialize)]
struct GoldenCase {
    input: String,
    stopwords: bool,
    punctuation: bool,
    articles: bool,
    expected: String,
    twice: String,
}

#[derive(Deserialize)]
struct Golden {
    sentences: usize,
    cases: Vec<GoldenCase>,
}

#[test]
fn stopword_list_is_frozen() {
    let digest = Sha256::digest(STOPWORDS_EN.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, STOPWORDS_SHA256);
    assert_eq!(STOPWORDS_EN.lines().count(), 179);
}

#[test]
fn removal_golden_corpus() {
    let golden: Golden = serde_json::from_str(include_str!("data/removal_golden.json")).unwrap();
    assert!(golden.sentences >= 50);
    assert_eq!(golden.cases.len(), golden.sentences * 8);
    for c in &golden.cases {
        let policy = RemovalPolicy {
            remove_stopwords: c.stopwords,
            remove_punctuation: c.punctuation,
            remove_articles: c.articles,
        };
        let once = apply_removal(&c.input, &policy);
        assert_eq!(once, c.expected, "{:?} under {policy}", c.input);
        assert_eq!(apply_removal(&once, &policy), c.twice);
        assert_eq!(c.twice, c.expected);
    }
}

#[test]
fn word_classes_follow_priority() {
    assert_eq!(classify_word("An"), TokenClass::Article);
    assert_eq!(classify_word("the"), TokenClass::Article);
    assert_eq!(classify_word("because"), TokenClass::Stopword);
    assert_eq!(classify_word("—"), TokenClass::Punctuation);
    assert_eq!(classify_word("..."), TokenClass::Punctuation);
    assert_eq!(classify_word("mat"), TokenClass::Other);
    assert_eq!(classify_word("a."), TokenClass::Other);
}

fn word_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("the".to_string()),
        Just("A".to_string()),
        Just("is".to_string()),
        Just("of".to_string()),
        Just(",".to_string()),
        Just("!?".to_string()),
        Just("«hi»".to_string()),
        "[a-zA-Z]{1,8}",
        "[a-z]{1,5}[.,;]",
        "[\"(][a-z]{1,5}[\")]",
    ]
}

fn sentence_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec((word_strategy(), prop_oneof![Just(" "), Just("  "), Just("\t"), Just("\n")]), 0..20)
        .prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect())
}

fn policy_strategy() -> impl Strategy<Value = RemovalPolicy> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(s, p, a)| RemovalPolicy {
        remove_stopwords: s,
        remove_punctuation: p,
        remove_articles: a,
    })
}

proptest! {
    #[test]
    fn removal_is_idempotent(text in sentence_strategy(), policy in policy_strategy()) {
        let once = apply_removal(&text, &policy);
        prop_assert_eq!(apply_removal(&once, &policy), once.clone());
        prop_assert!(once.len() <= text.len());
    }

    #[test]
    fn identity_only_normalizes_whitespace(text in sentence_strategy()) {
        let expected = text.split_whitespace().collect::<Vec<_>>().join(" ");
        prop_assert_eq!(apply_removal(&text, &RemovalPolicy::default()), expected);
    }

    #[test]
    fn pearson_symmetric_and_affine_invariant(
        seed in 0u64..10_000,
        a in 0.1f64..10.0,
        b in -100.0f64..100.0,
    ) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..50).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..50).map(|_| r.sample(StandardNormal)).collect();
        let base = pearson(&x, &y).unwrap().r;
        prop_assert!((pearson(&y, &x).unwrap().r - base).abs() < 1e-12);
        let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&x2, &y).unwrap().r - base).abs() < 1e-12);
        let x3: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson(&x3, &y).unwrap().r + base).abs() < 1e-12);
    }
}

/// Textbook single-pass formula with compensated sums.
fn textbook_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sum = |v: &mut dyn Iterator<Item = f64>| {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for t in v {
            let yk = t - c;
            let tk = s + yk;
            c = (tk - s) - yk;
            s = tk;
        }
        s
    };
    let sx = sum(&mut x.iter().copied());
    let sy = sum(&mut y.iter().copied());
    let sxy = sum(&mut x.iter().zip(y).map(|(a, b)| a * b));
    let sxx = sum(&mut x.iter().map(|a| a * a));
    let syy = sum(&mut y.iter().map(|b| b * b));
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn pearson_matches_textbook_formula() {
    let mut r = rng(21);
    for _ in 0..500 {
        let n = r.random_range(3..300);
        let rho: f64 = r.random_range(-0.99..0.99);
        let x: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| rho * v + (1.0 - rho * rho).sqrt() * r.sample::<f64, _>(StandardNormal))
            .collect();
        let got = pearson(&x, &y).unwrap();
        assert!((got.r - textbook_r(&x, &y)).abs() < 1e-12);
        assert_eq!(got.n, n);
    }
}

#[test]
fn t_series_matches_reference_distribution() {
    for dof in 1..200usize {
        let dist = StudentsT::new(0.0, 1.0, dof as f64).unwrap();
        for &t in &[0.0, 0.1, 0.5, 1.0, 1.96, 2.5, 4.0, 10.0] {
            let expected = 2.0 * dist.sf(t);
            let got = student_t_two_sided(t, dof);
            assert!((got - expected).abs() < 1e-10, "dof {dof} t {t}: {got} vs {expected}");
            assert_eq!(student_t_two_sided(-t, dof), got);
        }
    }
}

#[test]
fn small_sample_p_values_use_t_distribution() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
    let res = pearson(&x, &y).unwrap();
    let t = res.r * (4.0 / (1.0 - res.r * res.r)).sqrt();
    let expected = 2.0 * StudentsT::new(0.0, 1.0, 4.0).unwrap().sf(t);
    assert!((res.p_value - expected).abs() < 1e-12);
}

fn matrix_with_relative(rel: Array2<f64>) -> NonlinearityMatrix {
    let l = rel.nrows();
    NonlinearityMatrix {
        errors: rel.clone(),
        relative_errors: rel,
        linearity_profile: vec![0.5; l],
        ridge_lambda: 1e-3,
        mode: FitMode::Prompt,
        pseudoinverse: vec![false; l],
    }
}

#[test]
fn planted_affine_relation_gives_unit_correlation() {
    let mut r = rng(22);
    let rel = Array2::from_shape_fn((6, 120), |_| r.random_range(0.0..0.9));
    let nl = matrix_with_relative(rel);
    let lin = nl.token_linearity();
    let mut ctx: Vec<f64> = lin.iter().map(|v| 2.5 * v - 0.7).collect();
    // position 0 is ignored, so garbage there must not matter
    ctx[0] = 1e6;
    let res = linearity_context_correlation(&nl, &ctx).unwrap();
    assert!((res.r - 1.0).abs() < 1e-9);
    assert_eq!(res.n, 119);
    let neg: Vec<f64> = lin.iter().map(|v| -3.0 * v + 4.0).collect();
    assert!((linearity_context_correlation(&nl, &neg).unwrap().r + 1.0).abs() < 1e-9);
}

#[test]
fn independent_samples_rarely_reject() {
    let mut r = rng(23);
    let trials = 200;
    let mut kept = 0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..1000).map(|_| r.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..1000).map(|_| r.sample(StandardNormal)).collect();
        if pearson(&x, &y).unwrap().p_value > 0.05 {
            kept += 1;
        }
    }
    // 99.9% binomial band for a 5% false-positive rate
    assert!(kept >= 180, "{kept}/{trials}");
}

fn mixed_table(seed: u64, words: usize) -> (TokenTable, Vec<TokenClass>) {
    let pool: [(&str, TokenClass); 10] = [
        ("the", TokenClass::Article),
        ("An", TokenClass::Article),
        ("of", TokenClass::Stopword),
        ("They", TokenClass::Stopword),
        (",", TokenClass::Punctuation),
        ("?!", TokenClass::Punctuation),
        ("river", TokenClass::Other),
        ("Quartz", TokenClass::Other),
        ("7", TokenClass::Other),
        ("$", TokenClass::Other),
    ];
    let mut r = rng(seed);
    let mut text = String::new();
    let mut tokens = Vec::new();
    let mut classes = Vec::new();
    for w in 0..words {
        let (word, class) = pool[r.random_range(0..pool.len())];
        if w > 0 {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(word);
        tokens.push(Token {
            text: word.to_string(),
            span: [start, text.len()],
            word: w,
            id: w as u32,
            tag: Some(if class == TokenClass::Other { "content" } else { "function" }.to_string()),
        });
        classes.push(class);
    }
    (TokenTable { text, tokens, vocab: None }, classes)
}

#[test]
fn class_means_match_direct_grouping() {
    for seed in 0..20 {
        let (table, classes) = mixed_table(seed, 200);
        assert_eq!(token_classes(&table), classes);
        let mut r = rng(seed + 1000);
        let scores: Vec<f64> = (0..200).map(|_| r.random_range(0.0..5.0)).collect();
        let agg = aggregate_by_class(&scores, &table, 10).unwrap();
        let mut total = 0;
        for class in TokenClass::ALL {
            let vals: Vec<f64> = (1..200).filter(|&i| classes[i] == class).map(|i| scores[i]).collect();
            let h = &agg.by_class[&class];
            assert_eq!(h.count_total as usize, vals.len());
            assert_eq!(h.counts.iter().sum::<u64>() as usize, vals.len());
            total += vals.len();
            match h.mean {
                Some(m) => assert!((m - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-9),
                None => assert!(vals.is_empty()),
            }
        }
        assert_eq!(total, 199);
        let tags = agg.by_tag.as_ref().unwrap();
        assert_eq!(
            tags["content"].count_total as usize,
            (1..200).filter(|&i| classes[i] == TokenClass::Other).count()
        );
    }
}

#[test]
fn subword_tokens_inherit_word_class() {
    let text = "Theirs, unbelievable.";
    let tokens = vec![
        Token { text: "Theirs".into(), span: [0, 6], word: 0, id: 0, tag: None },
        Token { text: ",".into(), span: [6, 7], word: 0, id: 1, tag: None },
        Token { text: " un".into(), span: [7, 10], word: 1, id: 2, tag: None },
        Token { text: "believable".into(), span: [10, 20], word: 1, id: 3, tag: None },
        Token { text: ".".into(), span: [20, 21], word: 1, id: 4, tag: None },
    ];
    let table = TokenTable { text: text.into(), tokens, vocab: None };
    assert_eq!(
        token_classes(&table),
        vec![
            TokenClass::Stopword,
            TokenClass::Punctuation,
            TokenClass::Other,
            TokenClass::Other,
            TokenClass::Punctuation,
        ]
    );
}
