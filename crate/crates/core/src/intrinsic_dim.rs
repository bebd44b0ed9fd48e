//! TwoNN intrinsic-dimension estimation.
//!
//! For every point the ratio `μ = r2 / r1` of the distances to its two
//! nearest neighbors is computed by an exact brute-force scan. Under a
//! locally uniform density `μ` follows a Pareto law with exponent equal to
//! the intrinsic dimension, so `−ln(1 − F(μ)) = d · ln μ`. The estimate is
//! the least-squares slope through the origin over the empirical CDF of the
//! sorted ratios, after discarding the largest ratios.
//!
//! The scan costs `O(N² · D)` distance terms; inputs are capped at
//! [`MAX_POINTS`].

use std::collections::HashSet;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_store::DumpBundle;

pub const MAX_POINTS: usize = 100_000;
pub const DEFAULT_DISCARD_FRACTION: f64 = 0.1;
const MIN_POINTS_FOR_ESTIMATE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborStats {
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub mu: Vec<f64>,
    /// Row of the input each entry above belongs to.
    pub source_rows: Vec<usize>,
    /// Rows dropped because an identical earlier row exists.
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdEstimate {
    pub dimension: f64,
    pub points_used: usize,
    pub points_discarded_duplicates: usize,
    pub discard_fraction: f64,
    /// Root-mean-square residual of the origin-constrained fit.
    pub fit_residual: f64,
}

fn row_key(row: ndarray::ArrayView1<'_, f64>) -> Vec<u64> {
    // +0.0 and -0.0 are the same point.
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Distances to the two nearest distinct neighbors of every distinct point.
///
/// Exact duplicates are removed first (the first occurrence is kept). Ties
/// between equidistant neighbors go to the lower row index.
pub fn two_nearest(points: ArrayView2<'_, f64>) -> Result<NeighborStats> {
    let n = points.nrows();
    if n > MAX_POINTS {
        return Err(Error::Config(format!(
            "{n} points exceeds the brute-force limit of {MAX_POINTS}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite coordinate".into()));
    }

    let mut seen = HashSet::with_capacity(n);
    let mut source_rows = Vec::with_capacity(n);
    for (i, row) in points.outer_iter().enumerate() {
        if seen.insert(row_key(row)) {
            source_rows.push(i);
        }
    }
    let duplicates = n - source_rows.len();
    if source_rows.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 distinct points, got {}",
            source_rows.len()
        )));
    }

    let distinct: Array2<f64> = if duplicates == 0 {
        points.to_owned()
    } else {
        points.select(ndarray::Axis(0), &source_rows)
    };
    let m = distinct.nrows();

    let pairs: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let xi = distinct.row(i);
            let (mut best, mut second) = (f64::INFINITY, f64::INFINITY);
            for j in 0..m {
                if j == i {
                    continue;
                }
                let sq: f64 = xi
                    .iter()
                    .zip(distinct.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if sq < best {
                    second = best;
                    best = sq;
                } else if sq < second {
                    second = sq;
                }
            }
            (best.sqrt(), second.sqrt())
        })
        .collect();

    let (r1, r2): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let mu = r1.iter().zip(&r2).map(|(a, b)| b / a).collect();
    Ok(NeighborStats {
        r1,
        r2,
        mu,
        source_rows,
        duplicates,
    })
}

/// Origin-constrained least-squares TwoNN estimate.
///
/// Ratios equal to exactly 1 are dropped. The remaining `n` ratios are sorted,
/// point `i` (1-based) gets `F = i / n`, and the largest `discard_fraction`
/// of ratios are excluded from the fit (at least the last one, where `F = 1`).
pub fn estimate_id(points: ArrayView2<'_, f64>, discard_fraction: f64) -> Result<IdEstimate> {
    if !(0.0..1.0).contains(&discard_fraction) {
        return Err(Error::Config(format!(
            "discard_fraction must be in [0, 1), got {discard_fraction}"
        )));
    }
    let stats = two_nearest(points)?;
    let distinct = stats.mu.len();
    if distinct < MIN_POINTS_FOR_ESTIMATE {
        return Err(Error::DegenerateInput(format!(
            "need at least {MIN_POINTS_FOR_ESTIMATE} distinct points, got {distinct}"
        )));
    }

    let mut mu: Vec<f64> = stats.mu.into_iter().filter(|&m| m > 1.0).collect();
    if mu.is_empty() {
        return Err(Error::DegenerateInput(
            "every neighbor ratio equals 1; dimension is undefined".into(),
        ));
    }
    mu.sort_by(f64::total_cmp);
    let n = mu.len();
    let keep = (((n as f64) * (1.0 - discard_fraction)).floor() as usize).min(n - 1);
    if keep < 3 {
        return Err(Error::DegenerateInput(format!(
            "only {keep} ratios left after discarding; need at least 3"
        )));
    }

    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut xy = Vec::with_capacity(keep);
    for (i, &m) in mu.iter().take(keep).enumerate() {
        let f = (i + 1) as f64 / n as f64;
        let x = m.ln();
        let y = -(1.0 - f).ln();
        sxx += x * x;
        sxy += x * y;
        xy.push((x, y));
    }
    let dimension = sxy / sxx;
    let fit_residual = (xy
        .iter()
        .map(|(x, y)| (y - dimension * x).powi(2))
        .sum::<f64>()
        / keep as f64)
        .sqrt();

    Ok(IdEstimate {
        dimension,
        points_used: keep,
        points_discarded_duplicates: stats.duplicates,
        discard_fraction,
        fit_residual,
    })
}

/// One estimate per hidden stack, treating each token as a point.
pub fn estimate_id_per_layer(bundle: &DumpBundle, discard_fraction: f64) -> Result<Vec<IdEstimate>> {
    bundle
        .hidden
        .iter()
        .enumerate()
        .map(|(l, h)| {
            estimate_id(h.mapv(f64::from).view(), discard_fraction).map_err(|e| match e {
                Error::DegenerateInput(m) => Error::DegenerateInput(format!("layer {l}: {m}")),
                other => other,
            })
        })
        .collect()
}
