//! Row-major kernels behind the two backends.
//!
//! Both backends accumulate every dot product in ascending inner index, one
//! term at a time, so their outputs agree bit-for-bit; the parallel backend
//! only changes which thread owns which rows.

use rayon::prelude::*;

use crate::interval::Interval;

/// Slopes below this magnitude are treated as exactly zero.
pub const SLOPE_EPS: f64 = 1e-14;

const TILE_K: usize = 64;
const TILE_J: usize = 64;
const PAR_MIN_ROWS: usize = 8;
/// Approximate scalar operations per parallel task.
pub(crate) const PAR_TASK_WORK: usize = 1 << 15;

fn min_rows(work_per_row: usize) -> usize {
    (PAR_TASK_WORK / work_per_row.max(1)).max(PAR_MIN_ROWS)
}

/// `out = a · w` where `a` is `rows × inner` and `w` is `inner × cols`.
pub fn matmul_seq(a: &[f64], w: &[f64], out: &mut [f64], inner: usize, cols: usize) {
    for (a_row, out_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        out_row.fill(0.0);
        for (k, &aik) in a_row.iter().enumerate() {
            let w_row = &w[k * cols..(k + 1) * cols];
            for (o, &wkj) in out_row.iter_mut().zip(w_row) {
                *o += aik * wkj;
            }
        }
    }
}

/// Tiled variant of [`matmul_seq`]: row blocks run in parallel, and within a
/// block the (k, j) loops are tiled for cache reuse. Tiles over `k` are
/// visited in ascending order, preserving the accumulation sequence.
pub fn matmul_tiled_par(a: &[f64], w: &[f64], out: &mut [f64], inner: usize, cols: usize) {
    out.par_chunks_mut(cols)
        .zip(a.par_chunks(inner))
        .with_min_len(min_rows(inner * cols))
        .for_each(|(out_row, a_row)| {
            out_row.fill(0.0);
            for k0 in (0..inner).step_by(TILE_K) {
                let k1 = (k0 + TILE_K).min(inner);
                for j0 in (0..cols).step_by(TILE_J) {
                    let j1 = (j0 + TILE_J).min(cols);
                    let out_tile = &mut out_row[j0..j1];
                    for k in k0..k1 {
                        let aik = a_row[k];
                        let w_tile = &w[k * cols + j0..k * cols + j1];
                        for (o, &wkj) in out_tile.iter_mut().zip(w_tile) {
                            *o += aik * wkj;
                        }
                    }
                }
            }
        });
}

pub fn add_bias_seq(m: &mut [f64], bias: &[f64]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (x, &c) in row.iter_mut().zip(bias) {
            *x += c;
        }
    }
}

pub fn add_bias_par(m: &mut [f64], bias: &[f64]) {
    m.par_chunks_mut(bias.len())
        .with_min_len(min_rows(bias.len()))
        .for_each(|row| {
            for (x, &c) in row.iter_mut().zip(bias) {
                *x += c;
            }
        });
}

/// Running bound state of the interval fold. Max/min/or are associative and
/// commutative, so any reduction order yields the same result.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    pub infeasible: bool,
}

impl Bounds {
    pub fn from_interval(i: Interval) -> Self {
        Self {
            lower: i.lower,
            upper: i.upper,
            infeasible: i.is_empty(),
        }
    }

    pub fn unbounded() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            infeasible: false,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            lower: self.lower.max(other.lower),
            upper: self.upper.min(other.upper),
            infeasible: self.infeasible || other.infeasible,
        }
    }

    pub fn into_interval(self) -> Interval {
        if self.infeasible {
            Interval::EMPTY
        } else {
            Interval::new(self.lower, self.upper)
        }
    }

    /// Adds `pattern·(offset + slope·z) ≥ 0`.
    #[inline]
    pub fn push(&mut self, pattern: f64, offset: f64, slope: f64) {
        let fs = pattern * slope;
        if slope.abs() < SLOPE_EPS {
            if pattern * offset < 0.0 {
                self.infeasible = true;
            }
        } else if fs > 0.0 {
            let t = -offset / slope;
            if t > self.lower {
                self.lower = t;
            }
        } else {
            let t = -offset / slope;
            if t < self.upper {
                self.upper = t;
            }
        }
    }
}

/// `sign` with `sign(0) = -1`.
#[inline]
pub fn pattern_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn si_relu_rows(value: &mut [f64], offset: &mut [f64], slope: &mut [f64]) -> Bounds {
    let mut b = Bounds::unbounded();
    for ((x, a), s) in value.iter_mut().zip(offset.iter_mut()).zip(slope.iter_mut()) {
        let f = pattern_of(*x);
        b.push(f, *a, *s);
        if f < 0.0 {
            *x = 0.0;
            *a = 0.0;
            *s = 0.0;
        }
    }
    b
}

pub fn si_relu_seq(value: &mut [f64], offset: &mut [f64], slope: &mut [f64]) -> Bounds {
    si_relu_rows(value, offset, slope)
}

pub fn si_relu_par(
    value: &mut [f64],
    offset: &mut [f64],
    slope: &mut [f64],
    cols: usize,
) -> Bounds {
    value
        .par_chunks_mut(cols)
        .zip(offset.par_chunks_mut(cols))
        .zip(slope.par_chunks_mut(cols))
        .with_min_len(min_rows(4 * cols))
        .map(|((x, a), s)| si_relu_rows(x, a, s))
        .reduce(Bounds::unbounded, Bounds::merge)
}
