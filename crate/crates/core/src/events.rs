//! Linear constraint systems in the scalar `z` and the selection events that
//! produce them: the reconstruction-error detector and the signs inside the
//! test statistic.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::engine::{kernels::pattern_of, AffineTriple};
use crate::error::{Error, Result};
use crate::interval::Interval;

/// Rows `coeff·z ≤ bound`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraintSet {
    pub coeffs: Vec<f64>,
    pub bounds: Vec<f64>,
}

impl LinearConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn push(&mut self, coeff: f64, bound: f64) {
        self.coeffs.push(coeff);
        self.bounds.push(bound);
    }

    /// Adds `sign·(offset + slope·z) ≥ 0`, i.e. `-sign·slope·z ≤ sign·offset`.
    pub fn push_sign(&mut self, sign: f64, offset: f64, slope: f64) {
        self.push(-sign * slope, sign * offset);
    }

    pub fn extend(&mut self, other: &LinearConstraintSet) {
        self.coeffs.extend_from_slice(&other.coeffs);
        self.bounds.extend_from_slice(&other.bounds);
    }

    pub fn solve(&self) -> Interval {
        solve_constraints(self)
    }
}

/// Intersection of the half-lines `coeff·z ≤ bound`.
pub fn solve_constraints(cs: &LinearConstraintSet) -> Interval {
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for (&c, &b) in cs.coeffs.iter().zip(&cs.bounds) {
        if c > 0.0 {
            upper = upper.min(b / c);
        } else if c < 0.0 {
            lower = lower.max(b / c);
        } else if b < 0.0 {
            return Interval::EMPTY;
        }
    }
    Interval::new(lower, upper)
}

/// Per-row linear form `R_i(z) = α_i + β_i z` of the ℓ1 error, valid while the
/// residual signs stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLines {
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
    /// Residual signs (rows × features), `sign(0) = -1`.
    pub signs: Vec<f64>,
    /// Count of residuals that were exactly zero at the current z.
    pub zero_residuals: usize,
}

/// Residual-sign and slope bookkeeping for `tap − out`.
pub fn error_lines(tap: &AffineTriple, out: &AffineTriple) -> Result<ErrorLines> {
    if tap.value.dim() != out.value.dim() {
        return Err(Error::dim("error_lines", tap.value.ncols(), out.value.ncols()));
    }
    let (n, d) = tap.value.dim();
    let mut lines = ErrorLines {
        intercept: Vec::with_capacity(n),
        slope: Vec::with_capacity(n),
        signs: Vec::with_capacity(n * d),
        zero_residuals: 0,
    };
    for i in 0..n {
        let (mut alpha, mut beta) = (0.0, 0.0);
        for j in 0..d {
            let r = tap.value[[i, j]] - out.value[[i, j]];
            if r == 0.0 {
                lines.zero_residuals += 1;
            }
            let s = pattern_of(r);
            alpha += s * (tap.offset[[i, j]] - out.offset[[i, j]]);
            beta += s * (tap.slope[[i, j]] - out.slope[[i, j]]);
            lines.signs.push(s);
        }
        lines.intercept.push(alpha);
        lines.slope.push(beta);
    }
    Ok(lines)
}

/// Constraints keeping the detector outcome fixed along the line: every
/// residual sign, and each row's side of the threshold row `threshold_row`.
pub fn ad_event_constraints(
    tap: &AffineTriple,
    out: &AffineTriple,
    threshold_row: usize,
    anomalous: &[usize],
) -> Result<(LinearConstraintSet, ErrorLines)> {
    let lines = error_lines(tap, out)?;
    let (n, d) = tap.value.dim();
    if threshold_row >= n {
        return Err(Error::dim("threshold row", n, threshold_row));
    }
    let mut cs = LinearConstraintSet::new();
    for i in 0..n {
        for j in 0..d {
            let s = lines.signs[i * d + j];
            cs.push_sign(
                s,
                tap.offset[[i, j]] - out.offset[[i, j]],
                tap.slope[[i, j]] - out.slope[[i, j]],
            );
        }
    }
    let (ak, bk) = (lines.intercept[threshold_row], lines.slope[threshold_row]);
    let mut flagged = vec![false; n];
    for &i in anomalous {
        flagged[i] = true;
    }
    for i in (0..n).filter(|&i| i != threshold_row) {
        let (da, db) = (lines.intercept[i] - ak, lines.slope[i] - bk);
        if flagged[i] {
            // R_i ≥ R_k
            cs.push_sign(1.0, da, db);
        } else {
            // R_i ≤ R_k
            cs.push_sign(-1.0, da, db);
        }
    }
    Ok((cs, lines))
}

/// Column-wise contrast `row j − mean over complement rows` of the target block.
pub fn target_contrast(
    m: ArrayView2<'_, f64>,
    n_source: usize,
    j: usize,
    anomalies: &[usize],
) -> Result<Vec<f64>> {
    let n_t = m.nrows() - n_source;
    let complement: Vec<usize> = (0..n_t).filter(|l| !anomalies.contains(l)).collect();
    if complement.is_empty() {
        return Err(Error::EmptyComplement);
    }
    let target = m.slice(ndarray::s![n_source.., ..]);
    let denom = complement.len() as f64;
    Ok(target
        .axis_iter(Axis(1))
        .map(|col| {
            let mean = complement.iter().map(|&l| col[l]).sum::<f64>() / denom;
            col[j] - mean
        })
        .collect())
}

/// Constraints keeping the signs of the contrast fixed along `offset + slope·z`.
pub fn sign_event_constraints(
    data: &AffineTriple,
    n_source: usize,
    j: usize,
    anomalies: &[usize],
    signs: &[f64],
) -> Result<LinearConstraintSet> {
    let d = data.offset.ncols();
    if signs.len() != d {
        return Err(Error::dim("sign vector", d, signs.len()));
    }
    let ca = target_contrast(data.offset.view(), n_source, j, anomalies)?;
    let cb = target_contrast(data.slope.view(), n_source, j, anomalies)?;
    let mut cs = LinearConstraintSet::new();
    for k in 0..d {
        cs.push_sign(signs[k], ca[k], cb[k]);
    }
    Ok(cs)
}
