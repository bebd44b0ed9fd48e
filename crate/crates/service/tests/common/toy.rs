//! The checked-in toy dump: a tiny residual network run over one sentence.

use std::collections::BTreeMap;

use hiddenscope_core::{DumpBundle, NormKind, Token, TokenTable};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TOY_TEXT: &str = "The cat sat on the mat, and the dog slept by the door.";
pub const TOY_SEED: u64 = 7;
pub const TOY_LAYERS: usize = 3;
pub const TOY_DIM: usize = 8;
pub const TOY_VOCAB: usize = 24;

/// Token text, byte span, word index.
type Piece = (String, [usize; 2], usize);

fn tokenize(text: &str) -> (Vec<Piece>, Vec<String>) {
    let mut pieces = Vec::new();
    let mut pos = 0;
    for (word, raw) in text.split(' ').enumerate() {
        let start = if word == 0 { pos } else { pos - 1 };
        let core_end = raw.trim_end_matches([',', '.']).len();
        pieces.push((text[start..pos + core_end].to_string(), [start, pos + core_end], word));
        for (i, c) in raw[core_end..].char_indices() {
            let b = pos + core_end + i;
            pieces.push((c.to_string(), [b, b + c.len_utf8()], word));
        }
        pos += raw.len() + 1;
    }
    let mut vocab: Vec<String> = Vec::new();
    for (t, _, _) in &pieces {
        if !vocab.contains(t) {
            vocab.push(t.clone());
        }
    }
    let mut filler = 0;
    while vocab.len() < TOY_VOCAB {
        vocab.push(format!("<unused{filler}>"));
        filler += 1;
    }
    (pieces, vocab)
}

fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * r.sample::<f64, _>(StandardNormal))
}

pub fn toy_bundle() -> DumpBundle {
    let (pieces, vocab) = tokenize(TOY_TEXT);
    let t = pieces.len();
    let mut r = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let embed = normal(&mut r, TOY_VOCAB, TOY_DIM, 1.0);
    let tokens: Vec<Token> = pieces
        .iter()
        .map(|(text, span, word)| Token {
            text: text.clone(),
            span: *span,
            word: *word,
            id: vocab.iter().position(|v| v == text).unwrap() as u32,
            tag: None,
        })
        .collect();

    let mut h = Array2::zeros((t, TOY_DIM));
    for (i, tok) in tokens.iter().enumerate() {
        for j in 0..TOY_DIM {
            let position = (i as f64 * (j + 1) as f64 * 0.3).sin() * 0.2;
            h[[i, j]] = embed[[tok.id as usize, j]] + position;
        }
    }
    let mut hidden = vec![h.clone()];
    for _ in 0..TOY_LAYERS {
        let w = normal(&mut r, TOY_DIM, TOY_DIM, 0.5);
        h = &h + &h.dot(&w).mapv(f64::tanh);
        hidden.push(h.clone());
    }
    let head = &embed + &normal(&mut r, TOY_VOCAB, TOY_DIM, 0.1);
    let context: Array1<f32> = (0..t)
        .map(|i| (i as f64 * 0.4 + r.random_range(0.0..1.0)) as f32)
        .collect();

    DumpBundle {
        hidden: hidden.iter().map(|x| x.mapv(|v| v as f32)).collect(),
        lm_head: head.mapv(|v| v as f32),
        final_norm_weight: Array1::from_shape_fn(TOY_DIM, |j| 1.0 + 0.05 * j as f32),
        final_norm_bias: None,
        norm_kind: NormKind::RmsNorm,
        norm_eps: 1e-5,
        tokens: TokenTable {
            text: TOY_TEXT.to_string(),
            tokens,
            vocab: Some(vocab),
        },
        context_scores: Some(context),
        metadata: BTreeMap::from([("model".to_string(), "toy-residual".to_string())]),
    }
}
