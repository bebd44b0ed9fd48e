#![allow(dead_code)]

use std::collections::BTreeMap;

use hiddenscope_core::{DumpBundle, NormKind, Token, TokenTable};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let g = gaussian(rng, n, n);
    let m = DMatrix::from_fn(n, n, |i, j| g[[i, j]]);
    let q = m.qr().q();
    Array2::from_shape_fn((n, n), |(i, j)| q[(i, j)])
}

pub fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Brute-force ridge solve: explicit normal equations, LU factorization,
/// naive triple-loop products.
pub fn oracle_ridge(s: ArrayView2<'_, f64>, d: ArrayView2<'_, f64>, lambda: f64) -> Array2<f64> {
    let (t, n) = s.dim();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut cross = DMatrix::<f64>::zeros(n, d.ncols());
    for i in 0..n {
        for j in 0..n {
            gram[(i, j)] = (0..t).map(|r| s[[r, i]] * s[[r, j]]).sum();
        }
        for j in 0..d.ncols() {
            cross[(i, j)] = (0..t).map(|r| s[[r, i]] * d[[r, j]]).sum();
        }
    }
    let trace: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    for i in 0..n {
        gram[(i, i)] += lambda * trace / n as f64;
    }
    from_na(&gram.lu().solve(&cross).expect("oracle system is regular"))
}

/// `‖S_i A − D_i‖₂` per row, with naive loops.
pub fn oracle_row_errors(s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, d: ArrayView2<'_, f64>) -> Vec<f64> {
    (0..s.nrows())
        .map(|i| {
            (0..a.ncols())
                .map(|j| {
                    let p: f64 = (0..s.ncols()).map(|k| s[[i, k]] * a[[k, j]]).sum();
                    (p - d[[i, j]]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Recomputes the centering/scaling recipe independently.
pub fn oracle_normalize(h: ArrayView2<'_, f64>) -> Array2<f64> {
    let (t, n) = h.dim();
    let mut out = h.to_owned();
    for j in 0..n {
        let m: f64 = (0..t).map(|i| h[[i, j]]).sum::<f64>() / t as f64;
        for i in 0..t {
            out[[i, j]] -= m;
        }
    }
    let fro2: f64 = out.iter().map(|v| v * v).sum();
    let scale = (fro2 / t as f64).sqrt();
    out.mapv(|v| v / scale)
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn token_table(t: usize, vocab: usize, seed: u64) -> TokenTable {
    let mut r = rng(seed);
    let mut text = String::new();
    let mut tokens = Vec::new();
    for i in 0..t {
        if i > 0 {
            text.push(' ');
        }
        let word = format!("w{i}");
        let start = text.len();
        text.push_str(&word);
        tokens.push(Token {
            text: word,
            span: [start, text.len()],
            word: i,
            id: r.random_range(0..vocab as u32),
            tag: None,
        });
    }
    TokenTable { text, tokens, vocab: None }
}

/// Bundle built from `f64` stacks (rounded to `f32`).
pub fn bundle_from(hidden: &[Array2<f64>], lm_head: Array2<f64>, norm: NormKind, seed: u64) -> DumpBundle {
    let t = hidden[0].nrows();
    let d = hidden[0].ncols();
    let v = lm_head.nrows();
    let mut r = rng(seed ^ 0x5eed);
    DumpBundle {
        hidden: hidden.iter().map(|h| h.mapv(|x| x as f32)).collect(),
        lm_head: lm_head.mapv(|x| x as f32),
        final_norm_weight: Array1::from_shape_simple_fn(d, || 1.0 + 0.1 * r.random::<f32>()),
        final_norm_bias: None,
        norm_kind: norm,
        norm_eps: 1e-5,
        tokens: token_table(t, v, seed),
        context_scores: None,
        metadata: BTreeMap::from([("model".to_string(), "toy".to_string())]),
    }
}

pub fn random_bundle(seed: u64, layers: usize, t: usize, d: usize, v: usize) -> DumpBundle {
    let mut r = rng(seed);
    let hidden: Vec<Array2<f64>> = (0..=layers).map(|_| gaussian(&mut r, t, d)).collect();
    let head = gaussian(&mut r, v, d);
    bundle_from(&hidden, head, NormKind::RmsNorm, seed)
}
