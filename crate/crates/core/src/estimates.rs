//! Country-year NMR trajectories from posterior draws: projection past the
//! data, countries without data, pairing with U5MR, crisis adjustments and
//! estimated-to-expected ratios.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{log_f, nmr_from_log_ratio, CountryInput, GlobalParams};
use crate::posterior::{FitCountry, FitData};
use crate::rng::rng_indexed;
use crate::sampler::PosteriorDraws;
use crate::splines::{build_knot_grid, coefficients_from, SplineBasis, BASE_YEAR};
use crate::stats::{median, quantile_sorted};

/// Under-five crisis deaths allocated to the neonatal period.
pub const CRISIS_NEONATAL_SHARE: f64 = 1.0 / 60.0;

/// NMR adjustment (per 1,000) from under-five crisis deaths and births.
pub fn crisis_nmr_adjustment(crisis_u5_deaths: f64, births: f64) -> Result<f64> {
    if !(births > 0.0) || crisis_u5_deaths < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "crisis adjustment needs births > 0 and deaths >= 0, got {crisis_u5_deaths} / {births}"
        )));
    }
    Ok(crisis_u5_deaths * CRISIS_NEONATAL_SHARE / births * 1000.0)
}

/// Scale of the coefficient increments for countries without data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoDataScale {
    /// Standard deviation `e^chi`, as the no-data recipe is written.
    #[default]
    Recipe,
    /// Standard deviation `e^(chi/2)`, consistent with `chi` being the mean
    /// log variance.
    ModelConsistent,
}

/// Extend `alpha` (coefficients through the last data-period knot) to `k`
/// coefficients by a random walk with increment variance `sigma2`.
pub fn project_coefficients<R: Rng + ?Sized>(
    alpha: &[f64],
    sigma2: f64,
    k: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = alpha.to_vec();
    let sd = sigma2.max(0.0).sqrt();
    while out.len() < k {
        let last = *out.last().unwrap_or(&0.0);
        let z: f64 = rng.sample(StandardNormal);
        out.push(last + sd * z);
    }
    out
}

/// Coefficients for a country without data from one draw of the global
/// parameters: `alpha_1 = lambda ~ N(0, sigma_lambda^2)`, then a random
/// walk.
pub fn simulate_no_data_country<R: Rng + ?Sized>(
    global: &GlobalParams,
    k: usize,
    scale: NoDataScale,
    rng: &mut R,
) -> Vec<f64> {
    let sd = match scale {
        NoDataScale::Recipe => global.chi.exp(),
        NoDataScale::ModelConsistent => (0.5 * global.chi).exp(),
    };
    let lambda = global.sigma_lambda * rng.sample::<f64, _>(StandardNormal);
    project_coefficients(&[lambda], sd * sd, k, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct YearSummary {
    pub year: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub expected_nmr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSummary {
    pub year: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateGrid {
    pub country_id: String,
    pub years: Vec<f64>,
    /// NMR draws `[draw][year]`, crisis adjustments included.
    pub trajectories: Vec<Vec<f64>>,
    /// Log ratio draws `[draw][year]`.
    pub log_ratio: Vec<Vec<f64>>,
    /// Log of the expected ratio `f(U)` per draw and year.
    pub log_expected: Vec<Vec<f64>>,
    pub summary: Vec<YearSummary>,
    /// Median and 95% interval of `1 / sigma2_eps`; absent without data.
    pub smoothing_precision: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierCheck {
    pub ratios: Vec<RatioSummary>,
    pub final_ratio: RatioSummary,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateConfig {
    pub horizon: f64,
    pub seed: u64,
    pub no_data_scale: NoDataScale,
    pub level: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            horizon: crate::splines::DEFAULT_HORIZON,
            seed: 1,
            no_data_scale: NoDataScale::Recipe,
            level: 0.95,
        }
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn interval(v: Vec<f64>, level: f64) -> (f64, f64, f64) {
    let s = sorted(v);
    let a = (1.0 - level) / 2.0;
    (
        quantile_sorted(&s, 0.5),
        quantile_sorted(&s, a),
        quantile_sorted(&s, 1.0 - a),
    )
}

/// Annual midyear grid from 1990.5 (or the first data year, if earlier)
/// to the horizon, restricted to the spline span.
pub fn year_grid(first_obs: Option<f64>, span_start: f64, horizon: f64) -> Vec<f64> {
    let mut y0 = BASE_YEAR as i32;
    if let Some(t) = first_obs {
        y0 = y0.min((t - 0.5).floor() as i32);
    }
    let mut t = y0 as f64 + 0.5;
    while t < span_start {
        t += 1.0;
    }
    let mut out = Vec::new();
    while t <= horizon + 1e-9 {
        out.push(t);
        t += 1.0;
    }
    out
}

pub(crate) fn global_at(draws: &PosteriorDraws, idx: &[usize; 10], d: usize) -> GlobalParams {
    let v = |i: usize| draws.pooled(idx[i])[d];
    GlobalParams {
        beta0: v(0),
        beta1: v(1),
        theta: v(2),
        omega: [v(3), v(4), v(5), v(6)],
        sigma_lambda: v(7),
        chi: v(8),
        psi: v(9),
    }
}

pub(crate) fn global_indices(draws: &PosteriorDraws) -> Result<[usize; 10]> {
    let names = [
        "beta0",
        "beta1",
        "theta",
        "omega[DHS]",
        "omega[OtherDHS]",
        "omega[MICS]",
        "omega[Others]",
        "sigma_lambda",
        "chi",
        "psi",
    ];
    let mut out = [0; 10];
    for (o, n) in out.iter_mut().zip(names) {
        *o = draws
            .param_index(n)
            .ok_or_else(|| Error::Data(format!("draws lack parameter '{n}'")))?;
    }
    Ok(out)
}

/// Log-ratio and expected log-ratio draws `[draw][time]` at `times` for a
/// fitted country, with coefficients projected past the last observation,
/// plus the smoothing precision draws.
pub fn log_ratio_draws<R: Rng + ?Sized>(
    fc: &FitCountry,
    draws: &PosteriorDraws,
    times: &[f64],
    u5mr: &[f64],
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let gidx = global_indices(draws)?;
    let id = &fc.country_id;
    let li = draws
        .param_index(&format!("lambda[{id}]"))
        .ok_or_else(|| Error::Data(format!("draws lack country '{id}'")))?;
    let k = fc.k();
    let si = li + k;
    if draws.names.get(si) != Some(&format!("sigma2_eps[{id}]")) {
        return Err(Error::Data(format!(
            "draws for '{id}' do not match its spline basis"
        )));
    }
    let last_t = fc
        .last_obs_t()
        .ok_or_else(|| Error::Data(format!("'{id}' has no observations")))?;
    let last_index = fc.grid.last_active_basis(last_t)?.min(k - 1);
    let rows: Vec<_> = times
        .iter()
        .map(|t| fc.basis.eval_row(*t))
        .collect::<Result<_>>()?;
    let n = draws.total_draws();
    let (mut log_r, mut log_e, mut prec) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for d in 0..n {
        let g = global_at(draws, &gidx, d);
        let lambda = draws.pooled(li)[d];
        let eps: Vec<f64> = (1..k).map(|q| draws.pooled(li + q)[d]).collect();
        let sigma2 = draws.pooled(si)[d];
        prec.push(1.0 / sigma2);
        let alpha = coefficients_from(lambda, &eps, &fc.transform)?;
        let alpha = project_coefficients(&alpha[..=last_index], sigma2, k, rng);
        let (lr, le) = trajectory(&g, &rows, u5mr, &alpha)?;
        log_r.push(lr);
        log_e.push(le);
    }
    Ok((log_r, log_e, prec))
}

fn trajectory(
    g: &GlobalParams,
    rows: &[crate::splines::BasisRow],
    u5mr: &[f64],
    alpha: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lr = Vec::with_capacity(rows.len());
    let mut le = Vec::with_capacity(rows.len());
    for (row, u) in rows.iter().zip(u5mr) {
        let f = log_f(*u, g.beta0, g.beta1, g.theta)?;
        lr.push(f + row.dot(alpha));
        le.push(f);
    }
    Ok((lr, le))
}

/// Log-ratio and expected log-ratio draws on `years` for one country.
#[allow(clippy::type_complexity)]
fn ratio_draws(
    country: &CountryInput,
    fit: Option<&FitCountry>,
    draws: &PosteriorDraws,
    years: &[f64],
    config: &EstimateConfig,
    index: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let mut rng = rng_indexed(
        config.seed,
        &format!("estimate/{}", country.country_id),
        index,
    );
    let us: Vec<f64> = years
        .iter()
        .map(|t| country.u5mr_at(*t))
        .collect::<Result<_>>()?;
    if let Some(fc) = fit {
        let (lr, le, p) = log_ratio_draws(fc, draws, years, &us, &mut rng)?;
        return Ok((lr, le, Some(p)));
    }
    let gidx = global_indices(draws)?;
    let grid = build_knot_grid(None, config.horizon)?;
    let k = grid.n_basis();
    let basis = SplineBasis::new(grid);
    let rows: Vec<_> = years
        .iter()
        .map(|t| basis.eval_row(*t))
        .collect::<Result<_>>()?;
    let n = draws.total_draws();
    let (mut log_r, mut log_e) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for d in 0..n {
        let g = global_at(draws, &gidx, d);
        let alpha = simulate_no_data_country(&g, k, config.no_data_scale, &mut rng);
        let (lr, le) = trajectory(&g, &rows, &us, &alpha)?;
        log_r.push(lr);
        log_e.push(le);
    }
    Ok((log_r, log_e, None))
}

/// Pair each log-ratio trajectory with a U5MR trajectory (a random draw,
/// with replacement, or the point series), transform to NMR and add crisis
/// adjustments.
pub fn combine_with_u5mr<R: Rng + ?Sized>(
    log_ratio: &[Vec<f64>],
    years: &[f64],
    country: &CountryInput,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let keys: Vec<i32> = years.iter().map(|t| (t - 0.5).round() as i32).collect();
    let point: Vec<f64> =
        keys.iter()
            .map(|y| {
                country.u5mr_point.get(y).copied().ok_or_else(|| {
                    Error::Data(format!("no U5MR for {} in {y}", country.country_id))
                })
            })
            .collect::<Result<_>>()?;
    let key_pos: Vec<usize> = {
        let all: Vec<i32> = country.u5mr_point.keys().copied().collect();
        keys.iter().map(|y| all.binary_search(y).unwrap()).collect()
    };
    let mut out = Vec::with_capacity(log_ratio.len());
    for lr in log_ratio {
        if lr.len() != years.len() {
            return Err(Error::Data(format!(
                "ratio trajectory of {} has {} years, grid has {}",
                country.country_id,
                lr.len(),
                years.len()
            )));
        }
        let u: Vec<f64> = match &country.u5mr_draws {
            Some(dr) if !dr.is_empty() => {
                let pick = &dr[rng.random_range(0..dr.len())];
                key_pos.iter().map(|p| pick[*p]).collect()
            }
            _ => point.clone(),
        };
        let traj = lr
            .iter()
            .zip(&u)
            .zip(&keys)
            .map(|((l, u), y)| {
                nmr_from_log_ratio(*l, *u)
                    + country.crisis_adjustments.get(y).copied().unwrap_or(0.0)
            })
            .collect();
        out.push(traj);
    }
    Ok(out)
}

/// Estimated-to-expected NMR ratios per year. The U5MR cancels, so the
/// ratio is `[R / (1 + R)] / [f / (1 + f)]`. The final year is flagged when
/// its median is at least 1.1 or at most 0.9 and its 95% interval excludes 1.
pub fn expected_vs_estimated(grid: &EstimateGrid) -> OutlierCheck {
    let ny = grid.years.len();
    let mut ratios = Vec::with_capacity(ny);
    for j in 0..ny {
        let v: Vec<f64> = grid
            .log_ratio
            .iter()
            .zip(&grid.log_expected)
            .map(|(lr, le)| {
                let share = 1.0 / (1.0 + (-lr[j]).exp());
                let expect = 1.0 / (1.0 + (-le[j]).exp());
                share / expect
            })
            .collect();
        let (m, lo, hi) = interval(v, 0.95);
        ratios.push(RatioSummary {
            year: grid.years[j],
            median: m,
            lower: lo,
            upper: hi,
        });
    }
    let final_ratio = ratios.last().cloned().unwrap_or(RatioSummary {
        year: f64::NAN,
        median: f64::NAN,
        lower: f64::NAN,
        upper: f64::NAN,
    });
    let flagged = outlier_rule(&final_ratio);
    OutlierCheck {
        ratios,
        final_ratio,
        flagged,
    }
}

pub fn outlier_rule(r: &RatioSummary) -> bool {
    let big = r.median >= 1.1 || r.median <= 0.9;
    let significant = r.lower > 1.0 || r.upper < 1.0;
    big && significant
}

/// Full estimate for one country. `fit` is the country's fit layout, or
/// `None` for a country without data.
pub fn estimate_country(
    country: &CountryInput,
    fit: Option<&FitCountry>,
    draws: &PosteriorDraws,
    config: &EstimateConfig,
    index: u64,
) -> Result<EstimateGrid> {
    let (span_start, first) = match fit {
        Some(fc) => (
            fc.grid.t_start(),
            fc.obs.iter().map(|o| o.t).reduce(f64::min),
        ),
        None => (build_knot_grid(None, config.horizon)?.t_start(), None),
    };
    let years = year_grid(first, span_start, config.horizon);
    let (log_r, log_e, prec) = ratio_draws(country, fit, draws, &years, config, index)?;
    let mut rng = rng_indexed(
        config.seed,
        &format!("combine/{}", country.country_id),
        index,
    );
    let traj = combine_with_u5mr(&log_r, &years, country, &mut rng)?;
    let mut summary = Vec::with_capacity(years.len());
    for (j, t) in years.iter().enumerate() {
        let (m, lo, hi) = interval(traj.iter().map(|v| v[j]).collect(), config.level);
        let u = country.u5mr_at(*t)?;
        let expected = median(
            &log_e
                .iter()
                .map(|v| nmr_from_log_ratio(v[j], u))
                .collect::<Vec<_>>(),
        );
        summary.push(YearSummary {
            year: *t,
            median: m,
            lower: lo,
            upper: hi,
            expected_nmr: expected,
        });
    }
    Ok(EstimateGrid {
        country_id: country.country_id.clone(),
        years,
        trajectories: traj,
        log_ratio: log_r,
        log_expected: log_e,
        summary,
        smoothing_precision: prec.map(|p| interval(p, 0.95)),
    })
}

/// Estimates for every country in `countries`, in order.
pub fn estimate_all(
    countries: &[CountryInput],
    data: &FitData,
    draws: &PosteriorDraws,
    config: &EstimateConfig,
) -> Result<Vec<EstimateGrid>> {
    use rayon::prelude::*;
    countries
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let fit = data.countries.iter().find(|f| f.country_id == c.country_id);
            estimate_country(c, fit, draws, config, i as u64)
        })
        .collect()
}

pub fn write_estimates<W: Write>(writer: W, grids: &[EstimateGrid]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "country_id",
        "year",
        "median",
        "lower95",
        "upper95",
        "expected_nmr",
    ])?;
    for g in grids {
        for s in &g.summary {
            w.write_record([
                g.country_id.clone(),
                format!("{:?}", s.year),
                format!("{:?}", s.median),
                format!("{:?}", s.lower),
                format!("{:?}", s.upper),
                format!("{:?}", s.expected_nmr),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_outliers<W: Write>(writer: W, grids: &[EstimateGrid]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "country_id",
        "year",
        "ratio",
        "lower95",
        "upper95",
        "outlying",
        "precision_median",
        "precision_lower95",
        "precision_upper95",
    ])?;
    for g in grids {
        let chk = expected_vs_estimated(g);
        let r = &chk.final_ratio;
        let (pm, pl, pu) = match g.smoothing_precision {
            Some((a, b, c)) => (format!("{a:?}"), format!("{b:?}"), format!("{c:?}")),
            None => Default::default(),
        };
        w.write_record([
            g.country_id.clone(),
            format!("{:?}", r.year),
            format!("{:?}", r.median),
            format!("{:?}", r.lower),
            format!("{:?}", r.upper),
            (chk.flagged as u8).to_string(),
            pm,
            pl,
            pu,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Draw-level NMR trajectories: `country_id, draw, year, nmr`.
pub fn write_trajectories<W: Write>(writer: W, grids: &[EstimateGrid]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(writer));
    w.write_record(["country_id", "draw", "year", "nmr"])?;
    for g in grids {
        for (d, traj) in g.trajectories.iter().enumerate() {
            for (t, v) in g.years.iter().zip(traj) {
                w.write_record([
                    g.country_id.clone(),
                    (d + 1).to_string(),
                    format!("{t:?}"),
                    format!("{v:?}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn crisis_rule() {
        assert!((crisis_nmr_adjustment(60_000.0, 1e6).unwrap() - 1.0).abs() < 1e-12);
        assert!(crisis_nmr_adjustment(1.0, 0.0).is_err());
    }

    #[test]
    fn zero_variance_projection_is_flat() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = project_coefficients(&[0.1, 0.3], 0.0, 6, &mut rng);
        assert_eq!(a, vec![0.1, 0.3, 0.3, 0.3, 0.3, 0.3]);
    }

    #[test]
    fn outlier_rule_needs_both_conditions() {
        let r = |m, lo, hi| RatioSummary {
            year: 2015.5,
            median: m,
            lower: lo,
            upper: hi,
        };
        assert!(outlier_rule(&r(1.2, 1.05, 1.4)));
        assert!(!outlier_rule(&r(1.15, 0.95, 1.4)));
        assert!(!outlier_rule(&r(1.05, 1.01, 1.1)));
        assert!(outlier_rule(&r(0.85, 0.7, 0.95)));
        assert!(outlier_rule(&r(0.9, 0.8, 0.99)));
    }

    #[test]
    fn year_grid_covers_base_period() {
        let g = year_grid(None, 1988.0, 2015.5);
        assert_eq!(g.first(), Some(&1990.5));
        assert_eq!(g.last(), Some(&2015.5));
        assert_eq!(g.len(), 26);
        let g = year_grid(Some(1961.2), 1960.5, 2015.5);
        assert_eq!(g.first(), Some(&1960.5));
    }
}
