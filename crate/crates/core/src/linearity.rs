//! Layer-to-layer linear maps and per-token nonlinearity.
//!
//! For each pair of adjacent hidden stacks `l` and `l + 1` the stacks are
//! centered and scaled ([`normalize_center`]), a ridge-regularized linear map
//! `A` with `S·A ≈ D` is fitted ([`fit_linear_map`]), and every token gets the
//! residual norm `‖S_i·A − D_i‖₂` ([`nonlinearity_scores`]).
//!
//! Maps act on row vectors from the right: `S` is `T x d`, `A` is `d x d`.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_store::DumpBundle;

/// Smallest ridge strength accepted when fitting and evaluating on one prompt.
pub const MIN_PROMPT_LAMBDA: f64 = 1e-6;
/// Default relative ridge strength.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
const REL_ERR_FLOOR: f64 = 1e-12;

/// A centered matrix scaled so that the mean squared row norm is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMatrix {
    pub values: Array2<f64>,
    pub column_means: Array1<f64>,
    pub scale: f64,
}

impl NormalizedMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }
}

pub fn normalize_center(h: ArrayView2<'_, f64>) -> Result<NormalizedMatrix> {
    let (t, d) = h.dim();
    if t < 2 {
        return Err(Error::Shape(format!("need at least 2 rows to center, got {t}")));
    }
    if d == 0 {
        return Err(Error::Shape("matrix has no columns".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in hidden states".into()));
    }
    let column_means = h.mean_axis(Axis(0)).expect("t >= 2");
    let mut values = &h - &column_means;
    let fro = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let raw = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fro == 0.0 || fro <= 1e-12 * raw {
        return Err(Error::DegenerateInput(
            "all rows identical; nothing left after centering".into(),
        ));
    }
    let scale = fro / (t as f64).sqrt();
    values.mapv_inplace(|v| v / scale);
    Ok(NormalizedMatrix {
        values,
        column_means,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearMapFit {
    /// `d x d`, applied as `S·A`.
    #[serde(skip)]
    pub map: Array2<f64>,
    pub ridge_lambda: f64,
    /// `ridge_lambda · trace(SᵀS) / d`, the value actually added to the diagonal.
    pub effective_lambda: f64,
    /// `‖S·A − D‖_F / ‖D‖_F` on the fitting rows.
    pub relative_residual: f64,
    /// Set when the normal matrix was singular and the minimum-norm
    /// pseudoinverse solution was used instead of the Cholesky solve.
    pub pseudoinverse: bool,
}

fn check_finite(m: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite value in {what}")))
    }
}

/// In-place Cholesky factorization of a symmetric matrix (lower triangle).
/// Returns `None` if a pivot is not safely positive.
fn cholesky(mut a: Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
    let tol = max_diag * f64::EPSILON * n as f64;
    for j in 0..n {
        let mut pivot = a[[j, j]];
        for k in 0..j {
            pivot -= a[[j, k]] * a[[j, k]];
        }
        if pivot.is_nan() || pivot <= tol {
            return None;
        }
        let pivot = pivot.sqrt();
        a[[j, j]] = pivot;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / pivot;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    Some(a)
}

/// Solves `L·Lᵀ·X = B` for every column of `B`.
fn cholesky_solve(l: &Array2<f64>, mut b: Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut v = b[[i, c]];
            for k in 0..i {
                v -= l[[i, k]] * b[[k, c]];
            }
            b[[i, c]] = v / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = b[[i, c]];
            for k in (i + 1)..n {
                v -= l[[k, i]] * b[[k, c]];
            }
            b[[i, c]] = v / l[[i, i]];
        }
    }
    b
}

fn pseudoinverse_solve(normal: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let n = normal.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| normal[[i, j]]);
    let r = DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[[i, j]]);
    let svd = m.svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * f64::EPSILON * n as f64;
    let x = svd
        .solve(&r, eps)
        .map_err(|e| Error::Numerical(format!("pseudoinverse solve failed: {e}")))?;
    Ok(Array2::from_shape_fn((x.nrows(), x.ncols()), |(i, j)| x[(i, j)]))
}

fn frobenius(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Ridge solution `A = (SᵀS + λ′I)⁻¹ SᵀD` with `λ′ = λ · trace(SᵀS) / d`.
///
/// With `λ = 0` and a singular `SᵀS` the minimum-norm least-squares solution
/// is returned and flagged.
pub fn fit_linear_map(
    src: ArrayView2<'_, f64>,
    dst: ArrayView2<'_, f64>,
    ridge_lambda: f64,
) -> Result<LinearMapFit> {
    if src.nrows() != dst.nrows() {
        return Err(Error::Shape(format!(
            "source has {} rows, target has {}",
            src.nrows(),
            dst.nrows()
        )));
    }
    if src.ncols() != dst.ncols() {
        return Err(Error::Shape(format!(
            "source width {} differs from target width {}",
            src.ncols(),
            dst.ncols()
        )));
    }
    if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
        return Err(Error::Config(format!(
            "ridge_lambda must be a non-negative finite number, got {ridge_lambda}"
        )));
    }
    check_finite(src, "source matrix")?;
    check_finite(dst, "target matrix")?;

    let d = src.ncols();
    let gram = src.t().dot(&src);
    let cross = src.t().dot(&dst);
    let trace: f64 = gram.diag().sum();
    let effective_lambda = ridge_lambda * trace / d as f64;

    let mut normal = gram;
    for i in 0..d {
        normal[[i, i]] += effective_lambda;
    }

    let (map, pseudoinverse) = match cholesky(normal.clone()) {
        Some(l) => (cholesky_solve(&l, cross), false),
        None => (pseudoinverse_solve(&normal, &cross)?, true),
    };
    check_finite(map.view(), "fitted map")?;

    let residual = &src.dot(&map) - &dst;
    let denom = frobenius(dst);
    let num = frobenius(residual.view());
    let relative_residual = if denom > 0.0 {
        num / denom
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };

    Ok(LinearMapFit {
        map,
        ridge_lambda,
        effective_lambda,
        relative_residual,
        pseudoinverse,
    })
}

/// Per-token residuals of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenResiduals {
    /// `‖S_i·A − D_i‖₂`.
    pub errors: Vec<f64>,
    /// `errors[i] / max(‖D_i‖₂, 1e-12)`.
    pub relative: Vec<f64>,
}

pub fn nonlinearity_scores(
    fit: &LinearMapFit,
    src: ArrayView2<'_, f64>,
    dst: ArrayView2<'_, f64>,
) -> Result<TokenResiduals> {
    let d = fit.map.nrows();
    if src.ncols() != d || dst.ncols() != fit.map.ncols() || src.nrows() != dst.nrows() {
        return Err(Error::Shape(format!(
            "map is {}x{}, source {}x{}, target {}x{}",
            d,
            fit.map.ncols(),
            src.nrows(),
            src.ncols(),
            dst.nrows(),
            dst.ncols()
        )));
    }
    let predicted = src.dot(&fit.map);
    let mut errors = Vec::with_capacity(src.nrows());
    let mut relative = Vec::with_capacity(src.nrows());
    for (p, t) in predicted.outer_iter().zip(dst.outer_iter()) {
        let err = p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        errors.push(err);
        relative.push(err / norm.max(REL_ERR_FLOOR));
    }
    Ok(TokenResiduals { errors, relative })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Fit and evaluate on the analyzed prompt only.
    Prompt,
    /// Fit on the analyzed prompt plus calibration dumps, evaluate on the prompt.
    Calibrated,
}

impl FitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FitMode::Prompt => "prompt",
            FitMode::Calibrated => "calibrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearityMatrix {
    /// `L x T`; row `l` is the transition `l -> l + 1`.
    pub errors: Array2<f64>,
    /// `L x T`.
    pub relative_errors: Array2<f64>,
    /// `1 − ‖S·A − D‖_F / ‖D‖_F` per transition, clipped to `[0, 1]`.
    pub linearity_profile: Vec<f64>,
    pub ridge_lambda: f64,
    pub mode: FitMode,
    /// Transitions that fell back to the pseudoinverse solve.
    pub pseudoinverse: Vec<bool>,
}

impl NonlinearityMatrix {
    /// Mean over transitions of `1 − relative_errors[l][i]`, clipped to `[0, 1]`.
    pub fn token_linearity(&self) -> Vec<f64> {
        let l = self.relative_errors.nrows() as f64;
        self.relative_errors
            .columns()
            .into_iter()
            .map(|col| col.iter().map(|r| (1.0 - r).clamp(0.0, 1.0)).sum::<f64>() / l)
            .collect()
    }
}

fn stack_rows(mats: &[ArrayView2<'_, f32>]) -> Array2<f64> {
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let cols = mats[0].ncols();
    let mut out = Array2::zeros((rows, cols));
    let mut at = 0;
    for m in mats {
        out.slice_mut(s![at..at + m.nrows(), ..])
            .assign(&m.mapv(f64::from));
        at += m.nrows();
    }
    out
}

struct TransitionResult {
    residuals: TokenResiduals,
    profile: f64,
    pseudoinverse: bool,
}

fn analyze_transition(
    layer: usize,
    bundle: &DumpBundle,
    calibration: &[DumpBundle],
    ridge_lambda: f64,
) -> Result<TransitionResult> {
    let t = bundle.seq_len();
    let src_parts: Vec<_> = std::iter::once(bundle)
        .chain(calibration)
        .map(|b| b.hidden[layer].view())
        .collect();
    let dst_parts: Vec<_> = std::iter::once(bundle)
        .chain(calibration)
        .map(|b| b.hidden[layer + 1].view())
        .collect();
    let src = normalize_center(stack_rows(&src_parts).view())?;
    let dst = normalize_center(stack_rows(&dst_parts).view())?;
    let fit = fit_linear_map(src.view(), dst.view(), ridge_lambda)?;

    let src_eval = src.values.slice(s![..t, ..]);
    let dst_eval = dst.values.slice(s![..t, ..]);
    let residuals = nonlinearity_scores(&fit, src_eval, dst_eval)?;

    let num = residuals.errors.iter().map(|e| e * e).sum::<f64>().sqrt();
    let den = frobenius(dst_eval);
    let rel = if den > 0.0 { num / den } else { 0.0 };
    Ok(TransitionResult {
        residuals,
        profile: (1.0 - rel).clamp(0.0, 1.0),
        pseudoinverse: fit.pseudoinverse,
    })
}

/// Nonlinearity of every transition of `bundle`.
///
/// Without calibration dumps the map is fitted on the prompt itself, which is
/// underdetermined whenever `T < d`; a ridge strength of at least
/// [`MIN_PROMPT_LAMBDA`] is then required. With calibration dumps the map is
/// fitted on the concatenated rows of `bundle` and all calibration dumps
/// (normalized together) and evaluated on the rows of `bundle` only.
pub fn analyze_linearity(
    bundle: &DumpBundle,
    ridge_lambda: f64,
    calibration: &[DumpBundle],
) -> Result<NonlinearityMatrix> {
    let layers = bundle.num_layers();
    if layers == 0 {
        return Err(Error::Config("need at least one layer transition".into()));
    }
    let mode = if calibration.is_empty() {
        FitMode::Prompt
    } else {
        FitMode::Calibrated
    };
    if mode == FitMode::Prompt && (ridge_lambda.is_nan() || ridge_lambda < MIN_PROMPT_LAMBDA) {
        return Err(Error::Config(format!(
            "underdetermined fit: prompt-only mode needs ridge_lambda >= {MIN_PROMPT_LAMBDA}, got {ridge_lambda}"
        )));
    }
    for (k, c) in calibration.iter().enumerate() {
        if c.hidden.len() != bundle.hidden.len() || c.hidden_dim() != bundle.hidden_dim() {
            return Err(Error::Config(format!(
                "calibration dump {k} has {} stacks of width {}, expected {} of width {}",
                c.hidden.len(),
                c.hidden_dim(),
                bundle.hidden.len(),
                bundle.hidden_dim()
            )));
        }
    }

    let results = (0..layers)
        .into_par_iter()
        .map(|l| analyze_transition(l, bundle, calibration, ridge_lambda))
        .collect::<Result<Vec<_>>>()?;

    let t = bundle.seq_len();
    let mut errors = Array2::zeros((layers, t));
    let mut relative_errors = Array2::zeros((layers, t));
    for (l, r) in results.iter().enumerate() {
        errors.row_mut(l).assign(&Array1::from(r.residuals.errors.clone()));
        relative_errors
            .row_mut(l)
            .assign(&Array1::from(r.residuals.relative.clone()));
    }
    Ok(NonlinearityMatrix {
        errors,
        relative_errors,
        linearity_profile: results.iter().map(|r| r.profile).collect(),
        ridge_lambda,
        mode,
        pseudoinverse: results.iter().map(|r| r.pseudoinverse).collect(),
    })
}
