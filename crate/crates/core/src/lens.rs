//! Logit lens: reading next-token predictions out of every layer.
//!
//! Each hidden state is (optionally) passed through the model's final norm,
//! projected with the LM head, and turned into log-probabilities. The error
//! of layer `l` at position `i` is the negative log-probability assigned to
//! the true token at `i + 1`; the contribution of block `l` is how much that
//! error drops from layer `l` to layer `l + 1`.
//!
//! All arithmetic after loading runs in `f64`.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{DumpBundle, NormKind};

/// Rows of the LM head converted to `f64` at a time.
const HEAD_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LensConfig {
    pub apply_final_norm: bool,
    pub top_k: usize,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            apply_final_norm: true,
            top_k: 5,
        }
    }
}

/// Applies a final normalization to one hidden state.
///
/// RMS norm: `h / sqrt(mean(h²) + eps) ⊙ w (+ b)`.
/// Layer norm: `(h − mean) / sqrt(var + eps) ⊙ w (+ b)`.
pub fn apply_norm(
    h: &[f64],
    kind: NormKind,
    weight: ArrayView1<'_, f32>,
    bias: Option<ArrayView1<'_, f32>>,
    eps: f64,
) -> Vec<f64> {
    let n = h.len() as f64;
    let (shift, denom) = match kind {
        NormKind::None => return h.to_vec(),
        NormKind::RmsNorm => {
            let ms = h.iter().map(|v| v * v).sum::<f64>() / n;
            (0.0, (ms + eps).sqrt())
        }
        NormKind::LayerNorm => {
            let mean = h.iter().sum::<f64>() / n;
            let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, (var + eps).sqrt())
        }
    };
    h.iter()
        .enumerate()
        .map(|(j, v)| {
            let b = bias.map_or(0.0, |b| f64::from(b[j]));
            (v - shift) / denom * f64::from(weight[j]) + b
        })
        .collect()
}

fn norm_rows(bundle: &DumpBundle, rows: ArrayView2<'_, f32>, apply: bool) -> Array2<f64> {
    let kind = if apply { bundle.norm_kind } else { NormKind::None };
    let mut out = Array2::zeros(rows.dim());
    for (i, row) in rows.outer_iter().enumerate() {
        let h: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        let normed = apply_norm(
            &h,
            kind,
            bundle.final_norm_weight.view(),
            bundle.final_norm_bias.as_ref().map(|b| b.view()),
            bundle.norm_eps,
        );
        out.row_mut(i).assign(&ArrayView1::from(&normed));
    }
    out
}

/// `states · lm_headᵀ`, `T x V`, accumulated in `f64`.
fn project_rows(states: ArrayView2<'_, f64>, lm_head: ArrayView2<'_, f32>) -> Array2<f64> {
    let v = lm_head.nrows();
    let blocks: Vec<(usize, Array2<f64>)> = (0..v)
        .step_by(HEAD_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + HEAD_CHUNK).min(v);
            let head = lm_head.slice(s![start..end, ..]).mapv(f64::from);
            (start, states.dot(&head.t()))
        })
        .collect();
    let mut logits = Array2::zeros((states.nrows(), v));
    for (start, block) in blocks {
        logits
            .slice_mut(s![.., start..start + block.ncols()])
            .assign(&block);
    }
    logits
}

/// Vocabulary logits for one hidden state.
pub fn project_to_vocab(h: ArrayView1<'_, f32>, bundle: &DumpBundle, cfg: &LensConfig) -> Result<Vec<f64>> {
    if h.len() != bundle.lm_head.ncols() {
        return Err(Error::Shape(format!(
            "hidden state has {} entries, LM head expects {}",
            h.len(),
            bundle.lm_head.ncols()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite hidden state".into()));
    }
    let row = h.insert_axis(ndarray::Axis(0));
    let normed = norm_rows(bundle, row, cfg.apply_final_norm);
    Ok(project_rows(normed.view(), bundle.lm_head.view()).row(0).to_vec())
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&z| z - log_z).collect()
}

/// `−log p[next_id]`.
pub fn next_token_error(log_probs: &[f64], next_id: usize) -> Result<f64> {
    let lp = log_probs.get(next_id).ok_or_else(|| {
        Error::Config(format!(
            "next token id {next_id} outside vocabulary of size {}",
            log_probs.len()
        ))
    })?;
    Ok(0.0 - lp)
}

/// Highest-probability entries, ties broken by the lower id.
fn top_k(log_probs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let order = |a: &usize, b: &usize| {
        log_probs[*b]
            .partial_cmp(&log_probs[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..log_probs.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx.into_iter().map(|i| (i as u32, log_probs[i])).collect()
}

/// Result of running the lens over every layer and position.
#[derive(Debug, Clone, PartialEq)]
pub struct LensGrid {
    /// `(L + 1) x T` lists of `(token_id, log_probability)`, most likely first.
    pub top_tokens: Vec<Vec<Vec<(u32, f64)>>>,
    /// `(L + 1) x (T − 1)`.
    pub next_token_error: Array2<f64>,
    /// `L x (T − 1)`: `next_token_error[l] − next_token_error[l + 1]`.
    pub contribution: Array2<f64>,
    pub config: LensConfig,
    /// False when normalization was requested but the dump has no norm.
    pub norm_applied: bool,
}

struct LayerLens {
    top: Vec<Vec<(u32, f64)>>,
    errors: Vec<f64>,
}

fn lens_layer(bundle: &DumpBundle, layer: usize, cfg: &LensConfig) -> Result<LayerLens> {
    let states = norm_rows(bundle, bundle.hidden[layer].view(), cfg.apply_final_norm);
    let logits = project_rows(states.view(), bundle.lm_head.view());
    let t = logits.nrows();
    let mut top = Vec::with_capacity(t);
    let mut errors = Vec::with_capacity(t.saturating_sub(1));
    for (i, row) in logits.outer_iter().enumerate() {
        let row = row.to_vec();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite logit at layer {layer}, position {i}"
            )));
        }
        let lp = log_softmax(&row);
        top.push(top_k(&lp, cfg.top_k));
        if i + 1 < t {
            let next = bundle.tokens.tokens[i + 1].id as usize;
            errors.push(next_token_error(&lp, next)?);
        }
    }
    Ok(LayerLens { top, errors })
}

pub fn build_lens_grid(bundle: &DumpBundle, cfg: &LensConfig) -> Result<LensGrid> {
    let t = bundle.seq_len();
    if t < 2 {
        return Err(Error::Config(format!(
            "logit lens needs at least 2 tokens to have a next token, got {t}"
        )));
    }
    if bundle.tokens.len() != t {
        return Err(Error::Shape(format!(
            "{} tokens for {t} hidden-state rows",
            bundle.tokens.len()
        )));
    }
    let v = bundle.vocab_size();
    if cfg.top_k == 0 || cfg.top_k > v {
        return Err(Error::Config(format!(
            "top_k must be in [1, {v}], got {}",
            cfg.top_k
        )));
    }

    let layers: Vec<LayerLens> = (0..bundle.hidden.len())
        .map(|l| lens_layer(bundle, l, cfg))
        .collect::<Result<_>>()?;

    let stacks = layers.len();
    let mut next_token_error = Array2::zeros((stacks, t - 1));
    for (l, layer) in layers.iter().enumerate() {
        for (i, e) in layer.errors.iter().enumerate() {
            next_token_error[[l, i]] = *e;
        }
    }
    let mut contribution = Array2::zeros((stacks - 1, t - 1));
    for l in 0..stacks - 1 {
        for i in 0..t - 1 {
            contribution[[l, i]] = next_token_error[[l, i]] - next_token_error[[l + 1, i]];
        }
    }

    Ok(LensGrid {
        top_tokens: layers.into_iter().map(|l| l.top).collect(),
        next_token_error,
        contribution,
        config: *cfg,
        norm_applied: cfg.apply_final_norm && bundle.norm_kind != NormKind::None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn rms_norm_by_hand() {
        let w = Array1::<f32>::ones(2);
        let out = apply_norm(&[3.0, 4.0], NormKind::RmsNorm, w.view(), None, 0.0);
        let r = 12.5f64.sqrt();
        assert!((out[0] - 3.0 / r).abs() < 1e-15);
        assert!((out[1] - 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_by_hand() {
        let w = array![2.0f32, 2.0];
        let b = array![1.0f32, -1.0];
        // mean 2, var 1
        let out = apply_norm(&[1.0, 3.0], NormKind::LayerNorm, w.view(), Some(b.view()), 0.0);
        assert_eq!(out, vec![-1.0, 1.0]);
    }

    #[test]
    fn uniform_logits() {
        let lp = log_softmax(&[0.5; 10]);
        for v in &lp {
            assert!((v + 10f64.ln()).abs() < 1e-15);
        }
        assert!((next_token_error(&lp, 3).unwrap() - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let lp = log_softmax(&[1000.0, 0.0]);
        assert_eq!(lp[0], 0.0);
        assert_eq!(lp[1], -1000.0);
    }

    #[test]
    fn certain_prediction_has_zero_error() {
        let lp = log_softmax(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(next_token_error(&lp, 0).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_id_rejected() {
        assert!(next_token_error(&[0.0], 1).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_lower_id() {
        let lp = [-1.0, -0.5, -1.0, -0.5, -3.0];
        assert_eq!(top_k(&lp, 3), vec![(1, -0.5), (3, -0.5), (0, -1.0)]);
        assert_eq!(top_k(&lp, 5).len(), 5);
    }
}
