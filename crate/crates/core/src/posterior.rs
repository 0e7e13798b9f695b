//! Fit-ready data layout plus the joint log posterior and its gradient.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{
    log_prior, CountryInput, CountryParams, GlobalParams, Observation, ParameterState, SeriesType,
    NORMAL_PRIOR_VAR, SCALE_MAX, THETA_MAX,
};
use crate::splines::{build_knot_grid, BasisRow, DifferenceTransform, KnotGrid, SplineBasis};
use crate::stats::LN_SQRT_2PI;

#[derive(Debug, Clone)]
pub struct FitObs {
    pub t: f64,
    /// Observed log ratio.
    pub y: f64,
    /// Country U5MR (model input) at `t`.
    pub u5mr: f64,
    pub ln_u5mr: f64,
    pub series: SeriesType,
    /// Sampling or stochastic variance, without the non-sampling term.
    pub own_var: f64,
    pub row: BasisRow,
    /// `[1, (M' b(t))...]`: loadings of `(lambda, eps)` on the log ratio.
    pub z: Vec<f64>,
}

impl FitObs {
    #[inline]
    pub fn variance(&self, g: &GlobalParams) -> f64 {
        let w = g.omega_for(self.series);
        self.own_var + w * w
    }

    #[inline]
    pub fn country_term(&self, c: &CountryParams) -> f64 {
        self.z[0] * c.lambda
            + self.z[1..]
                .iter()
                .zip(&c.eps)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    #[inline]
    pub fn mean(&self, g: &GlobalParams, c: &CountryParams) -> f64 {
        g.beta0 + g.beta1 * self.hinge(g.theta) + self.country_term(c)
    }

    #[inline]
    pub fn hinge(&self, theta: f64) -> f64 {
        if self.u5mr > theta {
            self.ln_u5mr - theta.ln()
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitCountry {
    pub country_id: String,
    pub grid: KnotGrid,
    pub basis: SplineBasis,
    pub transform: DifferenceTransform,
    /// Use [`FitCountry::push_obs`] to add observations so that the cached
    /// registration terms stay consistent.
    pub obs: Vec<FitObs>,
    pub(crate) fixed: FixedTerms,
}

/// Sums over registration observations, whose weights do not depend on
/// any parameter, in spline-coefficient space: `sum w b b'` (banded),
/// `sum w b y`, `sum w b`, `sum w`, `sum w y`.
#[derive(Debug, Clone, Default)]
pub(crate) struct FixedTerms {
    pub q: Vec<[f64; 4]>,
    pub b: Vec<f64>,
    pub a0: Vec<f64>,
    pub sw: f64,
    pub swy: f64,
}

impl FixedTerms {
    fn new(k: usize) -> Self {
        Self {
            q: vec![[0.0; 4]; k],
            b: vec![0.0; k],
            a0: vec![0.0; k],
            sw: 0.0,
            swy: 0.0,
        }
    }

    pub(crate) fn add(&mut self, row: &BasisRow, w: f64, y: f64) {
        self.sw += w;
        self.swy += w * y;
        add_row(&mut self.q, &mut self.b, &mut self.a0, row, w, y);
    }
}

/// Accumulate `w b b'`, `w b y` and `w b` for one basis row.
#[inline]
pub(crate) fn add_row(
    q: &mut [[f64; 4]],
    b: &mut [f64],
    a0: &mut [f64],
    row: &BasisRow,
    w: f64,
    y: f64,
) {
    let f = row.first;
    for a in 0..4 {
        let wv = w * row.values[a];
        b[f + a] += wv * y;
        a0[f + a] += wv;
        for c in 0..=a {
            q[f + a][a - c] += wv * row.values[c];
        }
    }
}

impl FitCountry {
    pub fn k(&self) -> usize {
        self.grid.n_basis()
    }

    /// Latest observation time, if any.
    pub fn last_obs_t(&self) -> Option<f64> {
        self.obs.iter().map(|o| o.t).reduce(f64::max)
    }

    pub fn new(country_id: &str, first_t: Option<f64>, horizon: f64) -> Result<Self> {
        let grid = build_knot_grid(first_t, horizon)?;
        let basis = SplineBasis::new(grid.clone());
        let transform = DifferenceTransform::new(grid.n_basis())?;
        let grid_k = grid.n_basis();
        Ok(Self {
            country_id: country_id.to_string(),
            grid,
            basis,
            transform,
            obs: Vec::new(),
            fixed: FixedTerms::new(grid_k),
        })
    }

    pub fn push_obs(
        &mut self,
        t: f64,
        y: f64,
        u5mr: f64,
        series: SeriesType,
        own_var: f64,
    ) -> Result<()> {
        if !(own_var.is_finite() && own_var >= 0.0) || (series.is_registration() && own_var == 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "{} observation at {t} has invalid error variance {own_var}",
                series
            )));
        }
        let row = self.basis.eval_row(t)?;
        let dense = row.to_dense(self.k());
        let mut z = Vec::with_capacity(self.k());
        z.push(1.0);
        z.extend(self.transform.apply_transpose(&dense));
        if series.is_registration() {
            self.fixed.add(&row, 1.0 / own_var, y);
        }
        self.obs.push(FitObs {
            t,
            y,
            u5mr,
            ln_u5mr: u5mr.ln(),
            series,
            own_var,
            row,
            z,
        });
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitData {
    pub countries: Vec<FitCountry>,
    pub horizon: f64,
}

impl FitData {
    /// Fit layout for every country with at least one included observation.
    ///
    /// Countries are ordered as in `countries`; included observations must
    /// carry a complete error specification.
    pub fn build(
        countries: &[CountryInput],
        observations: &[Observation],
        horizon: f64,
    ) -> Result<Self> {
        Self::build_with_span(countries, observations, &[], horizon)
    }

    /// As [`FitData::build`], but each country's knot grid also reaches back
    /// to its earliest included observation in `span`. Used to fit a subset
    /// of the data on the grids of the full set.
    pub fn build_with_span(
        countries: &[CountryInput],
        observations: &[Observation],
        span: &[Observation],
        horizon: f64,
    ) -> Result<Self> {
        let mut span_first: BTreeMap<&str, f64> = BTreeMap::new();
        for o in span.iter().filter(|o| o.included && o.t <= horizon) {
            let e = span_first.entry(o.country_id.as_str()).or_insert(o.t);
            *e = e.min(o.t);
        }
        let known: BTreeMap<&str, &CountryInput> = countries
            .iter()
            .map(|c| (c.country_id.as_str(), c))
            .collect();
        let mut by_country: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
        for o in observations.iter().filter(|o| o.included) {
            if !known.contains_key(o.country_id.as_str()) {
                return Err(Error::Data(format!(
                    "observation references unknown country '{}'",
                    o.country_id
                )));
            }
            if o.t > horizon {
                warn!(
                    "dropping {} observation at {} beyond horizon {horizon}",
                    o.country_id, o.t
                );
                continue;
            }
            by_country.entry(o.country_id.as_str()).or_default().push(o);
        }
        let mut out = Vec::new();
        for c in countries {
            let Some(list) = by_country.get(c.country_id.as_str()) else {
                continue;
            };
            let first = list
                .iter()
                .map(|o| o.t)
                .chain(span_first.get(c.country_id.as_str()).copied())
                .reduce(f64::min);
            let mut fc = FitCountry::new(&c.country_id, first, horizon)?;
            for o in list {
                let u = c.u5mr_at(o.t)?;
                fc.push_obs(o.t, o.log_ratio, u, o.series_type, o.own_variance()?)?;
            }
            out.push(fc);
        }
        Ok(Self {
            countries: out,
            horizon,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.countries.iter().map(|c| c.obs.len()).sum()
    }

    pub fn all_obs(&self) -> impl Iterator<Item = &FitObs> {
        self.countries.iter().flat_map(|c| c.obs.iter())
    }
}

pub fn log_likelihood(data: &FitData, state: &ParameterState) -> f64 {
    let g = &state.global;
    let mut ll = 0.0;
    for (fc, cp) in data.countries.iter().zip(&state.countries) {
        for o in &fc.obs {
            let v = o.variance(g);
            let r = o.y - o.mean(g, cp);
            ll += -LN_SQRT_2PI - 0.5 * v.ln() - 0.5 * r * r / v;
        }
    }
    ll
}

/// Joint log density of data and parameters, in coordinates where each
/// smoothing variance is represented by its log.
pub fn log_posterior(data: &FitData, state: &ParameterState) -> f64 {
    let lp = log_prior(&state.global, &state.countries);
    if !lp.is_finite() {
        return lp;
    }
    lp + log_likelihood(data, state)
}

/// Flat coordinates used by the gradient: `beta0, beta1, theta, omega[4],
/// sigma_lambda, chi, psi`, then per country `lambda, eps..., log sigma2_eps`.
pub fn to_coords(state: &ParameterState) -> Vec<f64> {
    let g = &state.global;
    let mut v = vec![g.beta0, g.beta1, g.theta];
    v.extend_from_slice(&g.omega);
    v.extend([g.sigma_lambda, g.chi, g.psi]);
    for c in &state.countries {
        v.push(c.lambda);
        v.extend_from_slice(&c.eps);
        v.push(c.sigma2_eps.ln());
    }
    v
}

pub fn from_coords(template: &ParameterState, v: &[f64]) -> ParameterState {
    let mut s = template.clone();
    s.global.beta0 = v[0];
    s.global.beta1 = v[1];
    s.global.theta = v[2];
    s.global.omega.copy_from_slice(&v[3..7]);
    s.global.sigma_lambda = v[7];
    s.global.chi = v[8];
    s.global.psi = v[9];
    let mut i = 10;
    for c in &mut s.countries {
        c.lambda = v[i];
        i += 1;
        let q = c.eps.len();
        c.eps.copy_from_slice(&v[i..i + q]);
        i += q;
        c.sigma2_eps = v[i].exp();
        i += 1;
    }
    s
}

/// Analytic gradient of [`log_posterior`] in [`to_coords`] order.
///
/// The uniform priors contribute nothing inside their support. At
/// `theta == U` for some observation the derivative in `theta` is one-sided.
pub fn log_posterior_gradient(data: &FitData, state: &ParameterState) -> Vec<f64> {
    let g = &state.global;
    let mut grad = vec![0.0; 10];
    let (mut d_b0, mut d_b1, mut d_theta) = (0.0, 0.0, 0.0);
    let mut d_omega = [0.0; 4];
    let mut country_parts = Vec::with_capacity(data.countries.len());
    for (fc, cp) in data.countries.iter().zip(&state.countries) {
        let k = fc.k();
        let mut d_u = vec![0.0; k];
        for o in &fc.obs {
            let v = o.variance(g);
            let r = o.y - o.mean(g, cp);
            let s = r / v;
            let h = o.hinge(g.theta);
            d_b0 += s;
            d_b1 += s * h;
            if o.u5mr > g.theta {
                d_theta += s * (-g.beta1 / g.theta);
            }
            for (d, z) in d_u.iter_mut().zip(&o.z) {
                *d += s * z;
            }
            if let Some(j) = o.series.survey_index() {
                let w = g.omega[j];
                d_omega[j] += -w / v + r * r * w / (v * v);
            }
        }
        // country priors
        let sl2 = g.sigma_lambda * g.sigma_lambda;
        d_u[0] -= cp.lambda / sl2;
        let q = cp.eps.len() as f64;
        let ss: f64 = cp.eps.iter().map(|e| e * e).sum();
        for (d, e) in d_u[1..].iter_mut().zip(&cp.eps) {
            *d -= e / cp.sigma2_eps;
        }
        let ls = cp.sigma2_eps.ln();
        let psi2 = g.psi * g.psi;
        let d_ls = -0.5 * q + 0.5 * ss / cp.sigma2_eps - (ls - g.chi) / psi2;
        country_parts.push((d_u, d_ls));
    }
    let mut d_sl = 0.0;
    let mut d_chi = -g.chi / NORMAL_PRIOR_VAR;
    let mut d_psi = 0.0;
    for cp in &state.countries {
        let ls = cp.sigma2_eps.ln();
        d_sl += -1.0 / g.sigma_lambda + cp.lambda * cp.lambda / g.sigma_lambda.powi(3);
        d_chi += (ls - g.chi) / (g.psi * g.psi);
        d_psi += -1.0 / g.psi + (ls - g.chi).powi(2) / g.psi.powi(3);
    }
    grad[0] = d_b0 - g.beta0 / NORMAL_PRIOR_VAR;
    grad[1] = d_b1 - g.beta1 / NORMAL_PRIOR_VAR;
    grad[2] = d_theta;
    grad[3..7].copy_from_slice(&d_omega);
    grad[7] = d_sl;
    grad[8] = d_chi;
    grad[9] = d_psi;
    for (d_u, d_ls) in country_parts {
        grad.extend(d_u);
        grad.push(d_ls);
    }
    grad
}

/// True when the state lies strictly inside the prior support.
pub fn in_support(g: &GlobalParams) -> bool {
    g.theta > 0.0
        && g.theta < THETA_MAX
        && g.sigma_lambda > 0.0
        && g.sigma_lambda < SCALE_MAX
        && g.psi > 0.0
        && g.psi < SCALE_MAX
        && g.omega.iter().all(|w| *w > 0.0 && *w < SCALE_MAX)
}

/// Human-readable dump of a state for diagnostics.
pub fn describe_state(state: &ParameterState) -> String {
    let g = &state.global;
    let worst = state
        .countries
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            !c.lambda.is_finite()
                || !c.sigma2_eps.is_finite()
                || c.eps.iter().any(|e| !e.is_finite())
        })
        .map(|(i, _)| i.to_string())
        .collect::<Vec<_>>();
    format!(
        "beta0={} beta1={} theta={} omega={:?} sigma_lambda={} chi={} psi={} nonfinite_countries=[{}]",
        g.beta0,
        g.beta1,
        g.theta,
        g.omega,
        g.sigma_lambda,
        g.chi,
        g.psi,
        worst.join(",")
    )
}
