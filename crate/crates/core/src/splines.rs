//! Cubic B-spline bases on a fixed 2.5-year knot grid, and the
//! first-difference reparameterisation of spline coefficients.
//!
//! The knot grid is anchored so one knot sits exactly on the horizon and
//! extends backward in whole 2.5-year steps until its first knot lies
//! strictly before the start of the period to cover. The basis is clamped:
//! boundary knots are replicated three extra times, so a grid with `n`
//! inter-knot intervals carries `K = n + 3` basis functions.

use crate::error::{Error, Result};

pub const KNOT_SPACING: f64 = 2.5;
pub const DEFAULT_HORIZON: f64 = 2015.5;
pub const BASE_YEAR: f64 = 1990.0;
const DEGREE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    /// Distinct breakpoints, strictly increasing, 2.5 years apart.
    knots: Vec<f64>,
}

impl KnotGrid {
    pub fn t_start(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_intervals(&self) -> usize {
        self.knots.len() - 1
    }

    /// Number of cubic basis functions, `K`.
    pub fn n_basis(&self) -> usize {
        self.n_intervals() + DEGREE
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start() && t <= self.t_end()
    }

    /// Index `j` of the interval `[knot_j, knot_{j+1})` holding `t`; the
    /// right end of the span belongs to the last interval.
    pub fn interval_index(&self, t: f64) -> Result<usize> {
        if !self.contains(t) {
            return Err(Error::OutOfRange {
                value: t,
                start: self.t_start(),
                end: self.t_end(),
            });
        }
        let raw = ((t - self.t_start()) / KNOT_SPACING).floor() as usize;
        Ok(raw.min(self.n_intervals() - 1))
    }

    /// Highest basis index whose support touches time `t`.
    pub fn last_active_basis(&self, t: f64) -> Result<usize> {
        Ok(self.interval_index(t)? + DEGREE)
    }
}

/// Build the knot grid covering `[min(1990, first_obs_year), horizon]`.
pub fn build_knot_grid(first_obs_year: Option<f64>, horizon: f64) -> Result<KnotGrid> {
    if !horizon.is_finite() || horizon < BASE_YEAR {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} precedes {BASE_YEAR}"
        )));
    }
    let start = match first_obs_year {
        Some(y) if !y.is_finite() => {
            return Err(Error::InvalidArgument(format!(
                "first observation year {y}"
            )))
        }
        Some(y) if y > horizon => {
            return Err(Error::InvalidArgument(format!(
                "first observation year {y} is after horizon {horizon}"
            )))
        }
        Some(y) => y.min(BASE_YEAR),
        None => BASE_YEAR,
    };
    let n = ((horizon - start) / KNOT_SPACING + 1e-9).floor() as usize + 1;
    let knots = (0..=n)
        .map(|j| horizon - KNOT_SPACING * (n - j) as f64)
        .collect();
    Ok(KnotGrid { knots })
}

/// Nonzero slice of a basis row: `values[i]` is `B_{first + i}(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisRow {
    pub first: usize,
    pub values: [f64; DEGREE + 1],
}

impl BasisRow {
    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(&coef[self.first..self.first + DEGREE + 1])
            .map(|(b, a)| b * a)
            .sum()
    }

    pub fn to_dense(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; k];
        out[self.first..self.first + DEGREE + 1].copy_from_slice(&self.values);
        out
    }
}

#[derive(Debug, Clone)]
pub struct SplineBasis {
    grid: KnotGrid,
    /// Clamped knot vector: boundary knots repeated `DEGREE + 1` times.
    ext: Vec<f64>,
}

impl SplineBasis {
    pub fn new(grid: KnotGrid) -> Self {
        let a = grid.t_start();
        let b = grid.t_end();
        let mut ext = Vec::with_capacity(grid.knots.len() + 2 * DEGREE);
        ext.extend(std::iter::repeat_n(a, DEGREE));
        ext.extend_from_slice(&grid.knots);
        ext.extend(std::iter::repeat_n(b, DEGREE));
        Self { grid, ext }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn n_basis(&self) -> usize {
        self.grid.n_basis()
    }

    pub fn eval_row(&self, t: f64) -> Result<BasisRow> {
        let j = self.grid.interval_index(t)?;
        let span = j + DEGREE;
        let u = &self.ext;
        let mut n = [0.0; DEGREE + 1];
        let mut left = [0.0; DEGREE + 1];
        let mut right = [0.0; DEGREE + 1];
        n[0] = 1.0;
        for d in 1..=DEGREE {
            left[d] = t - u[span + 1 - d];
            right[d] = u[span + d] - t;
            let mut saved = 0.0;
            for r in 0..d {
                let tmp = n[r] / (right[r + 1] + left[d - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            n[d] = saved;
        }
        Ok(BasisRow {
            first: j,
            values: n,
        })
    }

    /// All `K` basis values at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.eval_row(t)?.to_dense(self.n_basis()))
    }
}

pub fn eval_basis(grid: &KnotGrid, t: f64) -> Result<Vec<f64>> {
    SplineBasis::new(grid.clone()).eval(t)
}

/// `M = D'(DD')^{-1}` for the `(K-1) x K` first-difference matrix `D`.
///
/// `M * eps` is the unique vector with first differences `eps` and zero sum.
#[derive(Debug, Clone)]
pub struct DifferenceTransform {
    k: usize,
    /// Row-major `K x (K-1)`.
    m: Vec<f64>,
}

impl DifferenceTransform {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "difference transform needs K >= 2, got {k}"
            )));
        }
        let q = k - 1;
        let mut m = vec![0.0; k * q];
        let mut unit = vec![0.0; q];
        for col in 0..q {
            unit.iter_mut().for_each(|x| *x = 0.0);
            unit[col] = 1.0;
            let v = solve_ddt(&unit);
            for (row, val) in d_transpose(&v).into_iter().enumerate() {
                m[row * q + col] = val;
            }
        }
        Ok(Self { k, m })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[row * (self.k - 1) + col]
    }

    /// `M * eps` (length K).
    pub fn apply(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let q = self.k - 1;
        if eps.len() != q {
            return Err(Error::InvalidArgument(format!(
                "expected {q} fluctuations, got {}",
                eps.len()
            )));
        }
        Ok(self
            .m
            .chunks_exact(q)
            .map(|row| row.iter().zip(eps).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `M' * v` (length K-1).
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let q = self.k - 1;
        let mut out = vec![0.0; q];
        for (row, vi) in self.m.chunks_exact(q).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

pub fn difference_transform(k: usize) -> Result<DifferenceTransform> {
    DifferenceTransform::new(k)
}

/// Spline coefficients `alpha_k = lambda + (M * eps)_k`.
pub fn coefficients_from(
    lambda: f64,
    eps: &[f64],
    transform: &DifferenceTransform,
) -> Result<Vec<f64>> {
    let mut alpha = transform.apply(eps)?;
    alpha.iter_mut().for_each(|a| *a += lambda);
    Ok(alpha)
}

/// Thomas algorithm for `DD' v = rhs`; `DD'` has 2 on the diagonal and -1 off it.
fn solve_ddt(rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = -1.0 / 2.0;
    d[0] = rhs[0] / 2.0;
    for i in 1..n {
        let denom = 2.0 + c[i - 1];
        c[i] = -1.0 / denom;
        d[i] = (rhs[i] + d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// `D' v`: entry k is `v_{k-1} - v_k` with out-of-range terms zero.
fn d_transpose(v: &[f64]) -> Vec<f64> {
    let q = v.len();
    (0..=q)
        .map(|k| {
            let prev = if k > 0 { v[k - 1] } else { 0.0 };
            let cur = if k < q { v[k] } else { 0.0 };
            prev - cur
        })
        .collect()
}
