//! Model parameters, the global U5MR relation, ratio/NMR transforms, the
//! observation likelihood and the prior.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::splines::{coefficients_from, DifferenceTransform, SplineBasis};
use crate::stats::{normal_logpdf, normal_logpdf_var};

/// Prior variance of the normal priors on beta0, beta1 and chi.
pub const NORMAL_PRIOR_VAR: f64 = 100.0;
pub const THETA_MAX: f64 = 500.0;
pub const SCALE_MAX: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeriesType {
    VR,
    SVR,
    DHS,
    OtherDHS,
    MICS,
    Others,
}

/// Series types carrying a non-sampling error term, in `omega` index order.
pub const SURVEY_TYPES: [SeriesType; 4] = [
    SeriesType::DHS,
    SeriesType::OtherDHS,
    SeriesType::MICS,
    SeriesType::Others,
];

impl SeriesType {
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesType::VR => "VR",
            SeriesType::SVR => "SVR",
            SeriesType::DHS => "DHS",
            SeriesType::OtherDHS => "OtherDHS",
            SeriesType::MICS => "MICS",
            SeriesType::Others => "Others",
        }
    }

    /// VR and SVR carry a single registration error `tau`.
    pub fn is_registration(self) -> bool {
        matches!(self, SeriesType::VR | SeriesType::SVR)
    }

    pub fn survey_index(self) -> Option<usize> {
        SURVEY_TYPES.iter().position(|s| *s == self)
    }
}

impl fmt::Display for SeriesType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeriesType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "vr" => SeriesType::VR,
            "svr" => SeriesType::SVR,
            "dhs" => SeriesType::DHS,
            "otherdhs" => SeriesType::OtherDHS,
            "mics" => SeriesType::MICS,
            "others" | "other" => SeriesType::Others,
            _ => return Err(Error::Config(format!("unknown series type '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeCategory {
    Small,
    Other,
}

impl SizeCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeCategory::Small => "small",
            SizeCategory::Other => "other",
        }
    }
}

impl FromStr for SizeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Ok(SizeCategory::Small),
            "other" => Ok(SizeCategory::Other),
            _ => Err(Error::Config(format!("unknown size category '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub beta0: f64,
    pub beta1: f64,
    /// U5MR cutpoint, deaths per 1,000.
    pub theta: f64,
    /// Non-sampling SDs, indexed like [`SURVEY_TYPES`].
    pub omega: [f64; 4],
    pub sigma_lambda: f64,
    pub chi: f64,
    pub psi: f64,
}

impl GlobalParams {
    pub fn omega_for(&self, s: SeriesType) -> f64 {
        s.survey_index().map_or(0.0, |i| self.omega[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryParams {
    pub lambda: f64,
    pub eps: Vec<f64>,
    pub sigma2_eps: f64,
}

impl CountryParams {
    pub fn flat(k: usize) -> Self {
        Self {
            lambda: 0.0,
            eps: vec![0.0; k - 1],
            sigma2_eps: 1.0,
        }
    }
}

/// One MCMC state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub global: GlobalParams,
    pub countries: Vec<CountryParams>,
}

/// One data point on the log-ratio scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub country_id: String,
    pub t: f64,
    pub nmr: f64,
    pub u5mr: f64,
    pub log_ratio: f64,
    pub series_type: SeriesType,
    pub series_id: String,
    /// nu, log-ratio scale.
    pub sampling_sd: Option<f64>,
    /// tau, log-ratio scale (VR/SVR).
    pub stochastic_sd: Option<f64>,
    pub births: Option<f64>,
    pub included: bool,
}

impl Observation {
    /// Error variance excluding the non-sampling term.
    pub fn own_variance(&self) -> Result<f64> {
        let sd = if self.series_type.is_registration() {
            self.stochastic_sd.ok_or_else(|| {
                Error::InvalidState(format!(
                    "{} observation of {} at {} lacks a stochastic error",
                    self.series_type, self.country_id, self.t
                ))
            })?
        } else {
            self.sampling_sd.ok_or_else(|| {
                Error::InvalidState(format!(
                    "{} observation of {} at {} lacks a sampling error",
                    self.series_type, self.country_id, self.t
                ))
            })?
        };
        Ok(sd * sd)
    }

    pub fn variance(&self, global: &GlobalParams) -> Result<f64> {
        let w = global.omega_for(self.series_type);
        Ok(self.own_variance()? + w * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryInput {
    pub country_id: String,
    pub name: String,
    pub size_category: SizeCategory,
    /// Calendar year (estimate at midyear) to U5MR per 1,000.
    pub u5mr_point: BTreeMap<i32, f64>,
    /// Optional U5MR draws `[draw][year]`, years aligned with `u5mr_point`.
    pub u5mr_draws: Option<Vec<Vec<f64>>>,
    pub births: BTreeMap<i32, f64>,
    /// Additive NMR adjustment per 1,000, applied after estimation.
    pub crisis_adjustments: BTreeMap<i32, f64>,
}

impl CountryInput {
    /// U5MR at decimal time `t`, log-linear between midyear values.
    pub fn u5mr_at(&self, t: f64) -> Result<f64> {
        interpolate_log(&self.u5mr_point, t)
            .ok_or_else(|| Error::Data(format!("no U5MR available for {} at {t}", self.country_id)))
    }
}

pub(crate) fn interpolate_log(series: &BTreeMap<i32, f64>, t: f64) -> Option<f64> {
    let x = t - 0.5;
    let y0 = x.floor() as i32;
    let frac = x - y0 as f64;
    let a = series.get(&y0)?;
    if frac == 0.0 {
        return Some(*a);
    }
    let b = series.get(&(y0 + 1))?;
    Some((a.ln() * (1.0 - frac) + b.ln() * frac).exp())
}

/// `max(0, log u5mr - log theta)`.
#[inline]
pub fn hinge(u5mr: f64, theta: f64) -> f64 {
    if u5mr > theta {
        u5mr.ln() - theta.ln()
    } else {
        0.0
    }
}

/// Log of the global relation f: flat at `beta0` up to the cutpoint, then
/// linear in log U5MR with slope `beta1`.
pub fn log_f(u5mr: f64, beta0: f64, beta1: f64, theta: f64) -> Result<f64> {
    if !(u5mr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "U5MR must be positive, got {u5mr}"
        )));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cutpoint must be positive, got {theta}"
        )));
    }
    Ok(beta0 + beta1 * hinge(u5mr, theta))
}

/// `log R_{c,t} = log f(U_{c,t}) + sum_k B_k(t) alpha_k`.
pub fn log_ratio_model(
    country: &CountryInput,
    t: f64,
    global: &GlobalParams,
    cparams: &CountryParams,
    basis: &SplineBasis,
    transform: &DifferenceTransform,
) -> Result<f64> {
    let row = basis.eval_row(t)?;
    let alpha = coefficients_from(cparams.lambda, &cparams.eps, transform)?;
    let u = country.u5mr_at(t)?;
    Ok(log_f(u, global.beta0, global.beta1, global.theta)? + row.dot(&alpha))
}

/// `N = U * R / (1 + R)`.
pub fn ratio_to_nmr(ratio: f64, u5mr: f64) -> Result<f64> {
    if !(ratio > 0.0) || !(u5mr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} and U5MR {u5mr} must be positive"
        )));
    }
    if ratio.is_infinite() {
        return Ok(u5mr);
    }
    Ok(u5mr * ratio / (1.0 + ratio))
}

/// NMR from a log ratio; numerically stable for large |log R|.
pub fn nmr_from_log_ratio(log_ratio: f64, u5mr: f64) -> f64 {
    u5mr / (1.0 + (-log_ratio).exp())
}

/// `R = N / (U - N)`; never clamps.
pub fn nmr_to_ratio(nmr: f64, u5mr: f64) -> Result<f64> {
    if !(nmr > 0.0) || !(nmr < u5mr) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < NMR < U5MR, got NMR {nmr}, U5MR {u5mr}"
        )));
    }
    Ok(nmr / (u5mr - nmr))
}

pub fn obs_log_likelihood(
    obs: &Observation,
    log_r_at_t: f64,
    global: &GlobalParams,
) -> Result<f64> {
    let var = obs.variance(global)?;
    Ok(normal_logpdf_var(obs.log_ratio, log_r_at_t, var))
}

fn uniform_logpdf(x: f64, hi: f64) -> f64 {
    if x > 0.0 && x < hi {
        -hi.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log prior over the global parameters only.
pub fn log_prior_global(g: &GlobalParams) -> f64 {
    let sd = NORMAL_PRIOR_VAR.sqrt();
    let mut lp = normal_logpdf(g.beta0, 0.0, sd)
        + normal_logpdf(g.beta1, 0.0, sd)
        + normal_logpdf(g.chi, 0.0, sd)
        + uniform_logpdf(g.theta, THETA_MAX)
        + uniform_logpdf(g.sigma_lambda, SCALE_MAX)
        + uniform_logpdf(g.psi, SCALE_MAX);
    for w in g.omega {
        lp += uniform_logpdf(w, SCALE_MAX);
    }
    lp
}

/// Hierarchical prior terms for one country. The smoothing variance enters
/// through its log, so this is a density in `log sigma2_eps`.
pub fn log_prior_country(g: &GlobalParams, c: &CountryParams) -> f64 {
    if !(c.sigma2_eps > 0.0) || !(g.sigma_lambda > 0.0) || !(g.psi > 0.0) {
        return f64::NEG_INFINITY;
    }
    let sd_eps = c.sigma2_eps.sqrt();
    let mut lp = normal_logpdf(c.lambda, 0.0, g.sigma_lambda)
        + normal_logpdf(c.sigma2_eps.ln(), g.chi, g.psi);
    for e in &c.eps {
        lp += normal_logpdf(*e, 0.0, sd_eps);
    }
    lp
}

pub fn log_prior(global: &GlobalParams, countries: &[CountryParams]) -> f64 {
    let lp = log_prior_global(global);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + countries
        .iter()
        .map(|c| log_prior_country(global, c))
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{build_knot_grid, difference_transform};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use statrs::distribution::{Continuous, Normal};

    fn paper_global() -> GlobalParams {
        GlobalParams {
            beta0: 0.18,
            beta1: -0.62,
            theta: 34.27,
            omega: [0.1, 0.1, 0.1, 0.1],
            sigma_lambda: 0.2,
            chi: -4.0,
            psi: 0.8,
        }
    }

    fn obs(series: SeriesType, y: f64, nu: Option<f64>, tau: Option<f64>) -> Observation {
        Observation {
            country_id: "A".into(),
            t: 2000.5,
            nmr: 20.0,
            u5mr: 40.0,
            log_ratio: y,
            series_type: series,
            series_id: "A-1".into(),
            sampling_sd: nu,
            stochastic_sd: tau,
            births: None,
            included: true,
        }
    }

    #[test]
    fn log_f_examples() {
        let (b0, b1, th) = (0.18, -0.62, 34.27);
        assert_eq!(log_f(th / 2.0, b0, b1, th).unwrap(), 0.18);
        assert_eq!(log_f(th, 1.3, b1, th).unwrap(), 1.3);
        let v = log_f(th * std::f64::consts::E, b0, b1, th).unwrap();
        assert_abs_diff_eq!(v, -0.44, epsilon = 1e-12);
        assert!(log_f(0.0, b0, b1, th).is_err());
        assert!(log_f(-1.0, b0, b1, th).is_err());
    }

    #[test]
    fn transforms() {
        assert_eq!(ratio_to_nmr(1.0, 40.0).unwrap(), 20.0);
        assert_abs_diff_eq!(
            ratio_to_nmr(1.2, 100.0).unwrap(),
            100.0 * 1.2 / 2.2,
            epsilon = 1e-12
        );
        assert_eq!(ratio_to_nmr(f64::INFINITY, 30.0).unwrap(), 30.0);
        assert!((ratio_to_nmr(1e15, 30.0).unwrap() - 30.0).abs() < 1e-12);
        assert_eq!(nmr_to_ratio(20.0, 40.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            nmr_to_ratio(100.0 * 1.2 / 2.2, 100.0).unwrap(),
            1.2,
            epsilon = 1e-12
        );
        assert!(matches!(
            nmr_to_ratio(40.0, 40.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(nmr_to_ratio(50.0, 40.0).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let g = GlobalParams {
            omega: [0.0; 4],
            ..paper_global()
        };
        let vr = obs(SeriesType::VR, 0.4, None, Some(0.1));
        let ll = obs_log_likelihood(&vr, 0.4, &g).unwrap();
        assert_abs_diff_eq!(
            ll,
            -(0.1 * (2.0 * std::f64::consts::PI).sqrt()).ln(),
            epsilon = 1e-12
        );

        let dhs = obs(SeriesType::DHS, 0.4, Some(0.13), None);
        let vr13 = obs(SeriesType::VR, 0.4, None, Some(0.13));
        assert_abs_diff_eq!(
            obs_log_likelihood(&dhs, 0.1, &g).unwrap(),
            obs_log_likelihood(&vr13, 0.1, &g).unwrap(),
            epsilon = 1e-14
        );

        let g2 = GlobalParams {
            omega: [0.1; 4],
            ..paper_global()
        };
        let ll = obs_log_likelihood(&dhs, 0.2, &g2).unwrap();
        let oracle = Normal::new(0.2, 0.0269f64.sqrt()).unwrap().ln_pdf(0.4);
        assert_abs_diff_eq!(ll, oracle, epsilon = 1e-12);
    }

    #[test]
    fn likelihood_requires_error_fields() {
        let g = paper_global();
        let vr = obs(SeriesType::VR, 0.4, Some(0.1), None);
        assert!(matches!(
            obs_log_likelihood(&vr, 0.0, &g),
            Err(Error::InvalidState(_))
        ));
        let dhs = obs(SeriesType::MICS, 0.4, None, Some(0.1));
        assert!(matches!(
            obs_log_likelihood(&dhs, 0.0, &g),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn likelihood_integrates_to_one() {
        let g = paper_global();
        let o = obs(SeriesType::MICS, 0.0, Some(0.13), None);
        let sd = (0.13f64 * 0.13 + 0.01).sqrt();
        // trapezoid over +-12 sd
        let n = 40_000;
        let (lo, hi) = (0.3 - 12.0 * sd, 0.3 + 12.0 * sd);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let y = lo + i as f64 * h;
            let p = obs_log_likelihood(
                &Observation {
                    log_ratio: y,
                    ..o.clone()
                },
                0.3,
                &g,
            )
            .unwrap()
            .exp();
            total += if i == 0 || i == n { 0.5 * p } else { p };
        }
        assert!((total * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prior_support_and_differences() {
        let g = paper_global();
        let c = CountryParams {
            lambda: 0.1,
            eps: vec![0.0, 0.05, -0.02],
            sigma2_eps: 0.02,
        };
        assert!(log_prior(&g, std::slice::from_ref(&c)).is_finite());
        let bad = GlobalParams {
            theta: 600.0,
            ..g.clone()
        };
        assert_eq!(log_prior(&bad, std::slice::from_ref(&c)), f64::NEG_INFINITY);
        let bad = GlobalParams {
            psi: 41.0,
            ..g.clone()
        };
        assert_eq!(log_prior(&bad, &[]), f64::NEG_INFINITY);
        let bad = GlobalParams {
            omega: [0.1, -0.1, 0.1, 0.1],
            ..g.clone()
        };
        assert_eq!(log_prior(&bad, &[]), f64::NEG_INFINITY);

        let mid = GlobalParams {
            beta0: 0.0,
            beta1: 0.0,
            theta: 250.0,
            omega: [20.0; 4],
            sigma_lambda: 20.0,
            chi: 0.0,
            psi: 20.0,
        };
        assert!(log_prior(&mid, &[]).is_finite());

        let delta = 0.37;
        let c2 = CountryParams {
            lambda: c.lambda + delta,
            ..c.clone()
        };
        let diff =
            log_prior(&g, std::slice::from_ref(&c2)) - log_prior(&g, std::slice::from_ref(&c));
        let n = Normal::new(0.0, g.sigma_lambda).unwrap();
        assert_abs_diff_eq!(
            diff,
            n.ln_pdf(c2.lambda) - n.ln_pdf(c.lambda),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_ratio_model_examples() {
        let mut u5 = BTreeMap::new();
        for y in 1985..=2015 {
            u5.insert(y, 120.0 - 3.0 * (y - 1985) as f64);
        }
        let country = CountryInput {
            country_id: "A".into(),
            name: "A".into(),
            size_category: SizeCategory::Other,
            u5mr_point: u5,
            u5mr_draws: None,
            births: BTreeMap::new(),
            crisis_adjustments: BTreeMap::new(),
        };
        let g = paper_global();
        let grid = build_knot_grid(None, 2015.5).unwrap();
        let basis = SplineBasis::new(grid.clone());
        let m = difference_transform(grid.n_basis()).unwrap();
        let k = grid.n_basis();
        for t in [1990.5, 2001.2, 2015.5] {
            let u = country.u5mr_at(t).unwrap();
            let base = log_f(u, g.beta0, g.beta1, g.theta).unwrap();
            let zero = CountryParams {
                lambda: 0.0,
                eps: vec![0.0; k - 1],
                sigma2_eps: 1.0,
            };
            let lr = log_ratio_model(&country, t, &g, &zero, &basis, &m).unwrap();
            assert_abs_diff_eq!(lr, base, epsilon = 1e-12);
            let shifted = CountryParams {
                lambda: 0.3,
                ..zero
            };
            let lr = log_ratio_model(&country, t, &g, &shifted, &basis, &m).unwrap();
            assert_abs_diff_eq!(lr, base + 0.3, epsilon = 1e-12);
        }
        let zero = CountryParams::flat(k);
        assert!(matches!(
            log_ratio_model(&country, 2017.0, &g, &zero, &basis, &m),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn series_type_parsing() {
        assert_eq!(
            "Other DHS".parse::<SeriesType>().unwrap(),
            SeriesType::OtherDHS
        );
        assert_eq!("mics".parse::<SeriesType>().unwrap(), SeriesType::MICS);
        assert!("census".parse::<SeriesType>().is_err());
        for s in SURVEY_TYPES {
            assert_eq!(s.as_str().parse::<SeriesType>().unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn log_f_decreasing_above_cutpoint(theta in 5.0f64..200.0, a in 1.0f64..3.0, d in 0.01f64..2.0, b1 in -2.0f64..-0.01) {
            let u1 = theta * a;
            let u2 = u1 * (1.0 + d);
            prop_assert!(log_f(u2, 0.2, b1, theta).unwrap() < log_f(u1, 0.2, b1, theta).unwrap());
        }

        #[test]
        fn log_f_continuous_at_cutpoint(theta in 1.0f64..400.0, b0 in -1.0f64..1.0, b1 in -2.0f64..2.0) {
            let above = log_f(theta * (1.0 + 1e-12), b0, b1, theta).unwrap();
            prop_assert!((above - b0).abs() < 1e-10);
        }

        #[test]
        fn round_trip(log_r in (1e-6f64).ln()..(1e6f64).ln(), u in 1.0f64..400.0) {
            let r = log_r.exp();
            let n = ratio_to_nmr(r, u).unwrap();
            prop_assert!(n > 0.0 && n < u);
            let back = nmr_to_ratio(n, u).unwrap();
            prop_assert!(((back - r) / r).abs() < 1e-9 || (back - r).abs() < 1e-12);
        }

        #[test]
        fn nmr_bound(log_r in -30.0f64..30.0, u in 0.5f64..500.0) {
            let n = nmr_from_log_ratio(log_r, u);
            prop_assert!(n > 0.0 && n <= u);
        }
    }
}
