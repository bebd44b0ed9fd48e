//! Word classes, removal transforms and score statistics.
//!
//! Words fall into exactly one [`TokenClass`], checked in order: article
//! (`a`, `an`, `the`), stopword (the bundled 179-word English list), pure
//! punctuation (every character in a Unicode `P*` category), other.
//! Matching is case-insensitive.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::Serialize;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};
use crate::linearity::NonlinearityMatrix;
use crate::tensor_store::TokenTable;

/// The frozen stopword list, one lowercase word per line.
pub const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");
pub const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_EN.lines().filter(|l| !l.is_empty()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenClass {
    Article,
    Stopword,
    Punctuation,
    Other,
}

impl TokenClass {
    pub const ALL: [TokenClass; 4] = [
        TokenClass::Article,
        TokenClass::Stopword,
        TokenClass::Punctuation,
        TokenClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Article => "ARTICLE",
            TokenClass::Stopword => "STOPWORD",
            TokenClass::Punctuation => "PUNCTUATION",
            TokenClass::Other => "OTHER",
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn is_punctuation_char(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

pub fn classify_word(word: &str) -> TokenClass {
    if word.is_empty() {
        return TokenClass::Other;
    }
    let lower = word.to_lowercase();
    if ARTICLES.contains(&lower.as_str()) {
        TokenClass::Article
    } else if stopwords().contains(lower.as_str()) {
        TokenClass::Stopword
    } else if word.chars().all(is_punctuation_char) {
        TokenClass::Punctuation
    } else {
        TokenClass::Other
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RemovalPolicy {
    /// Stopwords include the articles.
    pub remove_stopwords: bool,
    pub remove_punctuation: bool,
    pub remove_articles: bool,
}

impl RemovalPolicy {
    pub fn targets(&self, class: TokenClass) -> bool {
        match class {
            TokenClass::Article => self.remove_articles || self.remove_stopwords,
            TokenClass::Stopword => self.remove_stopwords,
            TokenClass::Punctuation => self.remove_punctuation,
            TokenClass::Other => false,
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.remove_stopwords || self.remove_punctuation || self.remove_articles)
    }

    /// All eight flag combinations, identity first.
    pub fn all() -> Vec<RemovalPolicy> {
        (0..8u8)
            .map(|bits| RemovalPolicy {
                remove_stopwords: bits & 1 != 0,
                remove_punctuation: bits & 2 != 0,
                remove_articles: bits & 4 != 0,
            })
            .collect()
    }
}

impl FromStr for RemovalPolicy {
    type Err = Error;

    /// Comma-separated subset of `stopwords`, `punctuation`, `articles`.
    fn from_str(s: &str) -> Result<Self> {
        let mut p = RemovalPolicy::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "stopwords" => p.remove_stopwords = true,
                "punctuation" => p.remove_punctuation = true,
                "articles" => p.remove_articles = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown removal class {other:?}; expected stopwords, punctuation, articles"
                    )))
                }
            }
        }
        Ok(p)
    }
}

impl fmt::Display for RemovalPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.remove_stopwords {
            parts.push("stopwords");
        }
        if self.remove_punctuation {
            parts.push("punctuation");
        }
        if self.remove_articles {
            parts.push("articles");
        }
        f.write_str(&parts.join(","))
    }
}

fn chars(s: &str) -> Vec<&str> {
    s.char_indices().map(|(i, c)| &s[i..i + c.len_utf8()]).collect()
}

/// Splits a whitespace-delimited word into leading punctuation characters,
/// the core, and trailing punctuation characters.
fn split_units(word: &str) -> (Vec<&str>, &str, Vec<&str>) {
    let start = word
        .char_indices()
        .find(|(_, c)| !is_punctuation_char(*c))
        .map_or(word.len(), |(i, _)| i);
    let end = word
        .char_indices()
        .rev()
        .find(|(_, c)| !is_punctuation_char(*c))
        .map_or(start, |(i, c)| i + c.len_utf8());
    let lead = chars(&word[..start]);
    let trail = chars(&word[end.max(start)..]);
    (lead, &word[start..end.max(start)], trail)
}

/// Deletes every unit whose class the policy targets.
///
/// The text is split on whitespace; leading and trailing punctuation
/// characters of each word are separate units. Surviving units of a word stay
/// attached to each other, words are re-joined with single spaces.
pub fn apply_removal(text: &str, policy: &RemovalPolicy) -> String {
    let drop_punct = policy.targets(TokenClass::Punctuation);
    let mut words = Vec::new();
    for word in text.split_whitespace() {
        let (lead, core, trail) = split_units(word);
        let mut kept = String::with_capacity(word.len());
        for unit in &lead {
            if !drop_punct {
                kept.push_str(unit);
            }
        }
        if !core.is_empty() && !policy.targets(classify_word(core)) {
            kept.push_str(core);
        }
        for unit in &trail {
            if !drop_punct {
                kept.push_str(unit);
            }
        }
        if !kept.is_empty() {
            words.push(kept);
        }
    }
    words.join(" ")
}

/// Class of every token, derived from its source word.
///
/// A token whose own text is pure punctuation is `PUNCTUATION`; otherwise it
/// takes the class of its word's core (the word with surrounding punctuation
/// stripped).
pub fn token_classes(table: &TokenTable) -> Vec<TokenClass> {
    let mut spans: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for tok in &table.tokens {
        let e = spans.entry(tok.word).or_insert((tok.span[0], tok.span[1]));
        e.0 = e.0.min(tok.span[0]);
        e.1 = e.1.max(tok.span[1]);
    }
    let word_class: BTreeMap<usize, TokenClass> = spans
        .into_iter()
        .map(|(w, (b0, b1))| {
            let text = table.text.get(b0..b1).map(str::to_owned).unwrap_or_else(|| {
                table
                    .tokens
                    .iter()
                    .filter(|t| t.word == w)
                    .map(|t| t.text.as_str())
                    .collect()
            });
            let (_, core, _) = split_units(text.trim());
            (w, classify_word(core))
        })
        .collect();
    table
        .tokens
        .iter()
        .map(|tok| {
            let trimmed = tok.text.trim();
            if !trimmed.is_empty() && trimmed.chars().all(is_punctuation_char) {
                TokenClass::Punctuation
            } else {
                word_class[&tok.word]
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `None` for an empty class.
    pub mean: Option<f64>,
    pub count_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassHistograms {
    pub by_class: BTreeMap<TokenClass, ClassHistogram>,
    /// Present when the token table carries tags.
    pub by_tag: Option<BTreeMap<String, ClassHistogram>>,
}

fn common_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        lo = 0.0;
        hi = 1.0;
    } else if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect()
}

fn histogram(values: &[f64], edges: &[f64]) -> ClassHistogram {
    let bins = edges.len() - 1;
    let lo = edges[0];
    let width = (edges[bins] - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    ClassHistogram {
        bin_edges: edges.to_vec(),
        counts,
        mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
        count_total: values.len() as u64,
    }
}

/// Per-class score histograms over shared bin edges.
///
/// Position 0 has an empty prefix, so its contextualization score is not a
/// measurement and is left out.
pub fn aggregate_by_class(scores: &[f64], table: &TokenTable, bins: usize) -> Result<ClassHistograms> {
    if scores.len() != table.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} tokens",
            scores.len(),
            table.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let classes = token_classes(table);
    let measured = 1..scores.len();
    let edges = common_edges(&scores[measured.clone()], bins);

    let by_class = TokenClass::ALL
        .iter()
        .map(|&c| {
            let vals: Vec<f64> = measured
                .clone()
                .filter(|&i| classes[i] == c)
                .map(|i| scores[i])
                .collect();
            (c, histogram(&vals, &edges))
        })
        .collect();

    let by_tag = if table.tokens.iter().any(|t| t.tag.is_some()) {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for i in measured {
            if let Some(tag) = &table.tokens[i].tag {
                groups.entry(tag.clone()).or_default().push(scores[i]);
            }
        }
        Some(groups.into_iter().map(|(k, v)| (k, histogram(&v, &edges))).collect())
    } else {
        None
    };

    Ok(ClassHistograms { by_class, by_tag })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Sample size from which the two-sided p-value uses the normal tail.
pub const NORMAL_APPROX_MIN_N: usize = 200;

/// Two-sided tail probability `P(|T| > t)` for Student's t with integer
/// degrees of freedom, by the closed-form finite series in `θ = atan(t/√ν)`.
///
/// Odd ν: `A = (2/π)(θ + sinθ cosθ (1 + (2/3)cos²θ + … + (2·4…(ν−3))/(1·3…(ν−2)) cos^(ν−3)θ))`.
/// Even ν: `A = sinθ (1 + (1/2)cos²θ + … + (1·3…(ν−3))/(2·4…(ν−2)) cos^(ν−2)θ)`.
/// The tail is `1 − A`.
pub fn student_t_two_sided(t: f64, dof: usize) -> f64 {
    assert!(dof >= 1);
    if t.is_infinite() {
        return 0.0;
    }
    let theta = (t.abs() / (dof as f64).sqrt()).atan();
    let (sin, cos) = theta.sin_cos();
    let c2 = cos * cos;
    let a = if dof % 2 == 1 {
        let mut series = 0.0;
        if dof > 1 {
            let mut term = 1.0;
            series = 1.0;
            let mut k = 2;
            while k + 1 < dof {
                term *= k as f64 / (k + 1) as f64 * c2;
                series += term;
                k += 2;
            }
        }
        2.0 / std::f64::consts::PI * (theta + sin * cos * series)
    } else {
        let mut term = 1.0;
        let mut series = 1.0;
        let mut k = 1;
        while k + 1 < dof {
            term *= k as f64 / (k + 1) as f64 * c2;
            series += term;
            k += 2;
        }
        sin * series
    };
    (1.0 - a).clamp(0.0, 1.0)
}

fn normal_two_sided(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Pearson correlation with a two-sided p-value for `r = 0`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Shape(format!("x has {n} entries, y has {}", y.len())));
    }
    if n < 3 {
        return Err(Error::DegenerateInput(format!("need at least 3 pairs, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite sample".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let dof = n - 2;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (dof as f64 / (1.0 - r * r)).sqrt();
        if n >= NORMAL_APPROX_MIN_N {
            normal_two_sided(t)
        } else {
            student_t_two_sided(t, dof)
        }
    };
    Ok(CorrelationResult { r, p_value, n })
}

/// Correlates each token's layer-averaged linearity with its
/// contextualization score, skipping position 0 (empty prefix).
pub fn linearity_context_correlation(nl: &NonlinearityMatrix, context_scores: &[f64]) -> Result<CorrelationResult> {
    let linearity = nl.token_linearity();
    if linearity.len() != context_scores.len() {
        return Err(Error::Shape(format!(
            "{} tokens of linearity, {} context scores",
            linearity.len(),
            context_scores.len()
        )));
    }
    pearson(&linearity[1..], &context_scores[1..])
}
