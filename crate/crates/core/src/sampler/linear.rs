//! Exact Gaussian block update for `(beta0, beta1)` and every country's
//! `(lambda_c, eps_c)`, given the cutpoint and all variance parameters.
//!
//! Each country is handled in spline-coefficient space, `alpha = lambda 1 +
//! M eps`, where `lambda = mean(alpha)` and `eps = D alpha`. There the prior
//! precision is `D'D / sigma2 + 1 1' / (K^2 sigma_lambda^2)` and the data
//! precision is banded, so every solve is a banded Cholesky solve plus a
//! rank-one correction. The joint precision over all countries and the two
//! global coefficients has arrow structure; country blocks are eliminated
//! first (Schur complement onto the 2x2 global block), which also yields
//! the marginal likelihood of the cutpoint with every linear coefficient
//! integrated out.

use nalgebra::{Cholesky, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::banded::{self, Band};
use crate::model::{ParameterState, NORMAL_PRIOR_VAR};
use crate::posterior::{add_row, FitData};

struct Factor {
    /// Factor of the banded part `H`.
    l: Band,
    /// `sqrt(1 / (K^2 sigma_lambda^2))`, the rank-one loading.
    v: f64,
    /// `H^{-1} v 1`
    hv: Vec<f64>,
    /// `1 + v 1' H^{-1} v 1`
    denom: f64,
}

impl Factor {
    /// `Q^{-1} x` with `Q = H + v^2 1 1'`, in place.
    fn solve(&self, x: &mut [f64]) {
        banded::solve(&self.l, x);
        let proj = self.v * x.iter().sum::<f64>();
        for (xi, h) in x.iter_mut().zip(&self.hv) {
            *xi -= h * proj / self.denom;
        }
    }

    /// `x' Q^{-1} x`.
    fn quad(&self, x: &[f64]) -> f64 {
        let mut y = x.to_vec();
        banded::forward(&self.l, &mut y);
        let a: f64 = y.iter().map(|v| v * v).sum();
        let p: f64 = self.hv.iter().zip(x).map(|(h, v)| h * v).sum();
        a - p * p / self.denom
    }
}

struct CountryBlock {
    factor: Option<Factor>,
    /// `Q^{-1} b`
    g: Vec<f64>,
    /// `sum w b`
    a0: Vec<f64>,
    /// `Q^{-1} a0`
    g0: Vec<f64>,
    sigma_eps: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Factorised linear system for the current variance parameters.
pub struct LinearSystem {
    blocks: Vec<CountryBlock>,
    weights: Vec<Vec<f64>>,
    sw: f64,
    swy: f64,
    sigma_lambda: f64,
}

/// Cutpoint-dependent pieces of the global block.
pub struct GlobalBlock {
    pub precision: Matrix2<f64>,
    pub rhs: Vector2<f64>,
    g1: Vec<Vec<f64>>,
}

impl LinearSystem {
    pub fn new(data: &FitData, state: &ParameterState) -> Self {
        let g = &state.global;
        let mut blocks = Vec::with_capacity(data.countries.len());
        let mut weights = Vec::with_capacity(data.countries.len());
        let (mut sw, mut swy) = (0.0, 0.0);
        for (fc, cp) in data.countries.iter().zip(&state.countries) {
            let k = fc.k();
            let fixed = &fc.fixed;
            let mut q = fixed.q.clone();
            let mut b = fixed.b.clone();
            let mut a0 = fixed.a0.clone();
            sw += fixed.sw;
            swy += fixed.swy;
            let mut w_c = Vec::with_capacity(fc.obs.len());
            for o in &fc.obs {
                let w = 1.0 / o.variance(g);
                w_c.push(w);
                if o.series.is_registration() {
                    continue;
                }
                sw += w;
                swy += w * o.y;
                add_row(&mut q, &mut b, &mut a0, &o.row, w, o.y);
            }
            // first-difference penalty D'D / sigma2
            let pe = 1.0 / cp.sigma2_eps;
            for i in 0..k {
                let deg = if i == 0 || i == k - 1 { 1.0 } else { 2.0 };
                q[i][0] += if k == 1 { 0.0 } else { deg * pe };
                if i > 0 {
                    q[i][1] -= pe;
                }
            }
            let v = 1.0 / (k as f64 * g.sigma_lambda);
            let factor = banded::cholesky(&q).map(|l| {
                let mut hv = vec![v; k];
                banded::solve(&l, &mut hv);
                let denom = 1.0 + v * hv.iter().sum::<f64>();
                Factor { l, v, hv, denom }
            });
            let (gv, g0) = match &factor {
                Some(f) => {
                    let mut gv = b.clone();
                    f.solve(&mut gv);
                    let mut g0 = a0.clone();
                    f.solve(&mut g0);
                    (gv, g0)
                }
                None => (vec![0.0; k], vec![0.0; k]),
            };
            blocks.push(CountryBlock {
                factor,
                g: gv,
                a0,
                g0,
                sigma_eps: cp.sigma2_eps.sqrt(),
            });
            weights.push(w_c);
        }
        Self {
            blocks,
            weights,
            sw,
            swy,
            sigma_lambda: g.sigma_lambda,
        }
    }

    /// Schur complement onto `(beta0, beta1)` at cutpoint `theta`. With
    /// `keep_g1` the per-country solves `Q^{-1} a1` are kept for drawing.
    fn global_terms(&self, data: &FitData, theta: f64, keep_g1: bool) -> GlobalBlock {
        let inv_prior = 1.0 / NORMAL_PRIOR_VAR;
        let ln_theta = theta.ln();
        let (mut swh, mut swhh, mut swhy) = (0.0, 0.0, 0.0);
        let mut s00 = self.sw + inv_prior;
        let mut s01 = 0.0;
        let mut s11 = inv_prior;
        let mut r0 = self.swy;
        let mut r1 = 0.0;
        let mut g1s = Vec::with_capacity(if keep_g1 { self.blocks.len() } else { 0 });
        for ((fc, blk), w_c) in data.countries.iter().zip(&self.blocks).zip(&self.weights) {
            let k = fc.k();
            let mut a1 = vec![0.0; k];
            let mut any = false;
            for (o, w) in fc.obs.iter().zip(w_c) {
                if o.u5mr <= theta {
                    continue;
                }
                any = true;
                let h = o.ln_u5mr - ln_theta;
                let wh = w * h;
                swh += wh;
                swhh += wh * h;
                swhy += wh * o.y;
                for (a, v) in a1[o.row.first..o.row.first + 4]
                    .iter_mut()
                    .zip(&o.row.values)
                {
                    *a += wh * v;
                }
            }
            let Some(f) = &blk.factor else {
                if keep_g1 {
                    g1s.push(vec![0.0; k]);
                }
                continue;
            };
            s00 -= dot(&blk.a0, &blk.g0);
            r0 -= dot(&blk.a0, &blk.g);
            if !any {
                if keep_g1 {
                    g1s.push(vec![0.0; k]);
                }
                continue;
            }
            s01 -= dot(&blk.g0, &a1);
            r1 -= dot(&blk.g, &a1);
            if keep_g1 {
                let mut g1 = a1.clone();
                f.solve(&mut g1);
                s11 -= dot(&a1, &g1);
                g1s.push(g1);
            } else {
                s11 -= f.quad(&a1);
            }
        }
        s01 += swh;
        s11 += swhh;
        r1 += swhy;
        GlobalBlock {
            precision: Matrix2::new(s00, s01, s01, s11),
            rhs: Vector2::new(r0, r1),
            g1: g1s,
        }
    }

    pub fn global_block(&self, data: &FitData, theta: f64) -> GlobalBlock {
        self.global_terms(data, theta, true)
    }

    /// Log marginal likelihood of the cutpoint, up to a constant that does
    /// not depend on it.
    pub fn log_marginal_theta(&self, data: &FitData, theta: f64) -> f64 {
        let gb = self.global_terms(data, theta, false);
        match Cholesky::new(gb.precision) {
            Some(ch) => {
                let l = ch.l();
                let logdet = 2.0 * (l[(0, 0)].ln() + l[(1, 1)].ln());
                let m = ch.solve(&gb.rhs);
                -0.5 * logdet + 0.5 * gb.rhs.dot(&m)
            }
            None => f64::NEG_INFINITY,
        }
    }

    /// Posterior mean and covariance of `(beta0, beta1)` with country terms
    /// integrated out.
    pub fn global_moments(
        &self,
        data: &FitData,
        theta: f64,
    ) -> Option<(Vector2<f64>, Matrix2<f64>)> {
        let gb = self.global_block(data, theta);
        let ch = Cholesky::new(gb.precision)?;
        Some((ch.solve(&gb.rhs), ch.inverse()))
    }

    /// Joint exact draw of `(beta0, beta1)` and every `(lambda_c, eps_c)`.
    pub fn draw<R: Rng + ?Sized>(&self, data: &FitData, state: &mut ParameterState, rng: &mut R) {
        let theta = state.global.theta;
        let gb = self.global_block(data, theta);
        let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let beta = match Cholesky::new(gb.precision) {
            Some(ch) => {
                let mean = ch.solve(&gb.rhs);
                let noise = ch
                    .l()
                    .tr_solve_lower_triangular(&z)
                    .unwrap_or_else(Vector2::zeros);
                mean + noise
            }
            None => z * NORMAL_PRIOR_VAR.sqrt(),
        };
        state.global.beta0 = beta[0];
        state.global.beta1 = beta[1];
        for ((blk, g1), cp) in self
            .blocks
            .iter()
            .zip(&gb.g1)
            .zip(state.countries.iter_mut())
        {
            let k = blk.g.len();
            match &blk.factor {
                Some(f) => {
                    // w ~ N(0, Q) as L xi + v 1 xi0; Q^{-1} w ~ N(0, Q^{-1})
                    let xi: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                    let xi0: f64 = rng.sample(StandardNormal);
                    let mut noise = banded::lower_mul(&f.l, &xi);
                    for n in noise.iter_mut() {
                        *n += f.v * xi0;
                    }
                    f.solve(&mut noise);
                    let alpha: Vec<f64> = (0..k)
                        .map(|i| blk.g[i] - blk.g0[i] * beta[0] - g1[i] * beta[1] + noise[i])
                        .collect();
                    cp.lambda = alpha.iter().sum::<f64>() / k as f64;
                    for (i, e) in cp.eps.iter_mut().enumerate() {
                        *e = alpha[i + 1] - alpha[i];
                    }
                }
                None => {
                    cp.lambda = self.sigma_lambda * rng.sample::<f64, _>(StandardNormal);
                    for e in cp.eps.iter_mut() {
                        *e = blk.sigma_eps * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
    }
}
