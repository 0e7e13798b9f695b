//! Synthetic multi-country datasets drawn from the model itself, with the
//! generating parameters kept as a truth record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};

use crate::config::{lookup, parse_key_values, reject_unknown};
use crate::error::{Error, Result};
use crate::ingest::{classify_sizes, save_countries, save_observations, ImputationTable};
use crate::model::{
    log_f, nmr_from_log_ratio, CountryInput, CountryParams, GlobalParams, Observation, SeriesType,
    SizeCategory,
};
use crate::rng::rng_indexed;
use crate::splines::{
    build_knot_grid, coefficients_from, DifferenceTransform, SplineBasis, DEFAULT_HORIZON,
};

pub const FIRST_YEAR: i32 = 1950;
pub const LAST_YEAR: i32 = 2015;

/// Generating values used when a scenario does not override them.
pub fn default_truth() -> GlobalParams {
    GlobalParams {
        beta0: 0.18,
        beta1: -0.62,
        theta: 34.0,
        // DHS, OtherDHS, MICS, Others
        omega: [0.12, 0.15, 0.10, 0.18],
        sigma_lambda: 0.2,
        chi: -4.0,
        psi: 0.8,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub full_vr: usize,
    pub mixed: usize,
    pub survey_only: usize,
    pub sparse: usize,
    pub none: usize,
    pub truth: GlobalParams,
    /// Multiplies every noise source; 0 gives noise-free observations.
    pub noise_scale: f64,
    /// Share of survey observations whose sampling SD is not reported.
    pub missing_sd_fraction: f64,
    pub horizon: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            full_vr: 10,
            mixed: 15,
            survey_only: 12,
            sparse: 0,
            none: 3,
            truth: default_truth(),
            noise_scale: 1.0,
            missing_sd_fraction: 0.28,
            horizon: DEFAULT_HORIZON,
        }
    }
}

const SCENARIO_KEYS: [&str; 20] = [
    "full_vr",
    "mixed",
    "survey_only",
    "sparse",
    "none",
    "beta0",
    "beta1",
    "theta",
    "omega_dhs",
    "omega_otherdhs",
    "omega_mics",
    "omega_others",
    "sigma_lambda",
    "chi",
    "psi",
    "noise_scale",
    "missing_sd_fraction",
    "horizon",
    "seed",
    "name",
];

impl Scenario {
    pub fn n_countries(&self) -> usize {
        self.full_vr + self.mixed + self.survey_only + self.sparse + self.none
    }

    /// Parse a `key = value` scenario; unspecified keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let m = parse_key_values(text)?;
        reject_unknown(&m, &SCENARIO_KEYS)?;
        let mut s = Scenario::default();
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = lookup(&m, $key)? {
                    $field = v;
                }
            };
        }
        set!(s.full_vr, "full_vr");
        set!(s.mixed, "mixed");
        set!(s.survey_only, "survey_only");
        set!(s.sparse, "sparse");
        set!(s.none, "none");
        set!(s.truth.beta0, "beta0");
        set!(s.truth.beta1, "beta1");
        set!(s.truth.theta, "theta");
        set!(s.truth.omega[0], "omega_dhs");
        set!(s.truth.omega[1], "omega_otherdhs");
        set!(s.truth.omega[2], "omega_mics");
        set!(s.truth.omega[3], "omega_others");
        set!(s.truth.sigma_lambda, "sigma_lambda");
        set!(s.truth.chi, "chi");
        set!(s.truth.psi, "psi");
        set!(s.noise_scale, "noise_scale");
        set!(s.missing_sd_fraction, "missing_sd_fraction");
        set!(s.horizon, "horizon");
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_countries() == 0 {
            return Err(Error::Config("scenario has no countries".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_sd_fraction) {
            return Err(Error::Config(
                "missing_sd_fraction must lie in [0, 1]".into(),
            ));
        }
        let g = &self.truth;
        if !(g.theta > 0.0
            && g.sigma_lambda >= 0.0
            && g.psi >= 0.0
            && g.omega.iter().all(|w| *w >= 0.0))
        {
            return Err(Error::Config(
                "truth has invalid scale or cutpoint values".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    FullVr,
    Mixed,
    SurveyOnly,
    Sparse,
    NoData,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::FullVr => "full_vr",
            Pattern::Mixed => "mixed",
            Pattern::SurveyOnly => "survey_only",
            Pattern::Sparse => "sparse",
            Pattern::NoData => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryTruth {
    pub country_id: String,
    pub pattern: Pattern,
    pub first_obs: Option<f64>,
    pub params: CountryParams,
    /// True log R at midyear for every year of the U5MR series.
    pub log_ratio: BTreeMap<i32, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub global: GlobalParams,
    pub countries: Vec<CountryTruth>,
    /// Noise-free log R behind each emitted observation.
    pub obs_log_ratio: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub observations: Vec<Observation>,
    pub countries: Vec<CountryInput>,
    pub truth: Truth,
}

/// Survey noise on the log-ratio scale with sampling SD `nu` and
/// non-sampling SD `omega`.
pub fn survey_noise<R: Rng + ?Sized>(rng: &mut R, nu: f64, omega: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * (nu * nu + omega * omega).sqrt()
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn u5mr_curve<R: Rng + ?Sized>(rng: &mut R, pattern: Pattern) -> BTreeMap<i32, f64> {
    let start = match pattern {
        Pattern::FullVr => log_uniform(rng, 20.0, 120.0),
        _ => log_uniform(rng, 60.0, 320.0),
    };
    let end = (start * rng.random_range(0.08..0.5)).max(3.0);
    let mid = rng.random_range(1965.0..2000.0);
    let scale = rng.random_range(6.0..14.0);
    (FIRST_YEAR..=LAST_YEAR)
        .map(|y| {
            let t = y as f64 + 0.5;
            (y, end + (start - end) / (1.0 + ((t - mid) / scale).exp()))
        })
        .collect()
}

struct Planned {
    t: f64,
    series: SeriesType,
    series_id: String,
}

fn survey_block<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    series: SeriesType,
    year: f64,
    out: &mut Vec<Planned>,
) {
    let n = rng.random_range(3..=5);
    let sid = format!("{id}-{}-{}", series.as_str(), year.floor() as i32);
    for j in 0..n {
        let t = year - 1.25 - 2.5 * j as f64;
        if t >= FIRST_YEAR as f64 + 0.5 {
            out.push(Planned {
                t,
                series,
                series_id: sid.clone(),
            });
        }
    }
}

fn random_survey_type<R: Rng + ?Sized>(rng: &mut R) -> SeriesType {
    match rng.random_range(0..10) {
        0..=3 => SeriesType::DHS,
        4..=5 => SeriesType::OtherDHS,
        6..=7 => SeriesType::MICS,
        _ => SeriesType::Others,
    }
}

fn plan_observations<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    pattern: Pattern,
    horizon: f64,
) -> Vec<Planned> {
    let mut out = Vec::new();
    let last = (horizon - 0.5).min(LAST_YEAR as f64) as i32;
    match pattern {
        Pattern::FullVr => {
            let start = rng.random_range(FIRST_YEAR..=1975);
            let end = rng.random_range(2008..=2014).min(last);
            for y in start..=end {
                out.push(Planned {
                    t: y as f64 + 0.5,
                    series: SeriesType::VR,
                    series_id: format!("{id}-VR"),
                });
            }
        }
        Pattern::Mixed => {
            let start = rng.random_range(1965..=1995);
            let len = rng.random_range(8..=20);
            let svr = rng.random_range(0..4) == 0;
            for y in start..(start + len).min(last + 1) {
                out.push(Planned {
                    t: y as f64 + 0.5,
                    series: if svr { SeriesType::SVR } else { SeriesType::VR },
                    series_id: format!("{id}-{}", if svr { "SVR" } else { "VR" }),
                });
            }
            for _ in 0..rng.random_range(2..=4) {
                let year = rng.random_range(1985.0..(last as f64 + 0.9));
                let s = random_survey_type(rng);
                survey_block(rng, id, s, year, &mut out);
            }
        }
        Pattern::SurveyOnly => {
            for _ in 0..rng.random_range(3..=6) {
                let year = rng.random_range(1975.0..(last as f64 + 0.9));
                let s = random_survey_type(rng);
                survey_block(rng, id, s, year, &mut out);
            }
        }
        Pattern::Sparse => {
            let year = rng.random_range(1990.0..(last as f64 + 0.9));
            let series = random_survey_type(rng);
            let sid = format!("{id}-{}-{}", series.as_str(), year.floor() as i32);
            for j in 0..rng.random_range(1..=3) {
                out.push(Planned {
                    t: year - 1.25 - 2.5 * j as f64,
                    series,
                    series_id: sid.clone(),
                });
            }
        }
        Pattern::NoData => {}
    }
    out.retain(|p| p.t <= horizon);
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out
}

fn vr_counts<R: Rng + ?Sized>(rng: &mut R, births: f64, q5: f64, p: f64, noise: f64) -> (f64, f64) {
    if noise == 0.0 {
        let d5 = births * q5;
        return (d5, d5 * p);
    }
    let pois = Poisson::new(births * q5).expect("positive mean");
    loop {
        let d5 = pois.sample(rng) as u64;
        if d5 < 2 {
            continue;
        }
        let dn = Binomial::new(d5, p).expect("valid p").sample(rng);
        if dn > 0 && dn < d5 {
            return (d5 as f64, dn as f64);
        }
    }
}

fn pattern_list(s: &Scenario) -> Vec<Pattern> {
    let mut v = Vec::with_capacity(s.n_countries());
    v.extend(std::iter::repeat_n(Pattern::FullVr, s.full_vr));
    v.extend(std::iter::repeat_n(Pattern::Mixed, s.mixed));
    v.extend(std::iter::repeat_n(Pattern::SurveyOnly, s.survey_only));
    v.extend(std::iter::repeat_n(Pattern::Sparse, s.sparse));
    v.extend(std::iter::repeat_n(Pattern::NoData, s.none));
    v
}

/// Draw a dataset from the generative model.
pub fn generate(scenario: &Scenario, seed: u64) -> Result<SynthData> {
    scenario.validate()?;
    let g = &scenario.truth;
    let patterns = pattern_list(scenario);
    let width = patterns.len().to_string().len().max(3);

    // countries first, so size classes are known before imputation-aware noise
    let mut countries = Vec::with_capacity(patterns.len());
    let mut plans = Vec::with_capacity(patterns.len());
    for (i, pattern) in patterns.iter().enumerate() {
        let mut rng = rng_indexed(seed, "synth/country", i as u64);
        let id = format!("C{:0width$}", i + 1);
        let u5 = u5mr_curve(&mut rng, *pattern);
        let b0 = log_uniform(&mut rng, 3.0e3, 3.0e6);
        let trend = rng.random_range(-0.01..0.02);
        let births = (FIRST_YEAR..=LAST_YEAR)
            .map(|y| (y, (b0 * (trend * (y - 1990) as f64).exp()).round().max(1.0)))
            .collect();
        plans.push(plan_observations(&mut rng, &id, *pattern, scenario.horizon));
        countries.push(CountryInput {
            country_id: id.clone(),
            name: format!("Synthetic {}", i + 1),
            size_category: SizeCategory::Other,
            u5mr_point: u5,
            u5mr_draws: None,
            births,
            crisis_adjustments: BTreeMap::new(),
        });
    }
    classify_sizes(&mut countries, SizeCategory::Other);
    let table = ImputationTable::default();
    let noise = scenario.noise_scale;

    let mut observations = Vec::new();
    let mut obs_truth = Vec::new();
    let mut truths = Vec::with_capacity(countries.len());
    for (i, (c, plan)) in countries.iter().zip(plans).enumerate() {
        let mut rng = rng_indexed(seed, "synth/data", i as u64);
        let first = plan.first().map(|p| p.t);
        let grid = build_knot_grid(first, scenario.horizon)?;
        let basis = SplineBasis::new(grid);
        let k = basis.n_basis();
        let transform = DifferenceTransform::new(k)?;
        let lambda = g.sigma_lambda * rng.sample::<f64, _>(StandardNormal);
        let sigma2 = (g.chi + g.psi * rng.sample::<f64, _>(StandardNormal)).exp();
        let eps: Vec<f64> = (0..k - 1)
            .map(|_| sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let alpha = coefficients_from(lambda, &eps, &transform)?;
        let log_r_at = |t: f64| -> Result<f64> {
            let u = c.u5mr_at(t)?;
            let tt = t.max(basis.grid().t_start());
            Ok(log_f(u, g.beta0, g.beta1, g.theta)? + basis.eval_row(tt)?.dot(&alpha))
        };
        let mut series_log_r = BTreeMap::new();
        for y in c.u5mr_point.keys() {
            let t = *y as f64 + 0.5;
            if t >= basis.grid().t_start() && t <= scenario.horizon {
                series_log_r.insert(*y, log_r_at(t)?);
            }
        }
        for p in plan {
            let u = c.u5mr_at(p.t)?;
            let lr = log_r_at(p.t)?;
            let births_t = c.births[&((p.t - 0.5).round() as i32)];
            let mut obs = Observation {
                country_id: c.country_id.clone(),
                t: p.t,
                nmr: 0.0,
                u5mr: u,
                log_ratio: 0.0,
                series_type: p.series,
                series_id: p.series_id,
                sampling_sd: None,
                stochastic_sd: None,
                births: None,
                included: true,
            };
            match p.series {
                SeriesType::VR => {
                    let q5 = u / 1000.0;
                    let share = 1.0 / (1.0 + (-lr).exp());
                    let (d5, dn) = vr_counts(&mut rng, births_t, q5, share, noise);
                    obs.nmr = dn / births_t * 1000.0;
                    obs.u5mr = d5 / births_t * 1000.0;
                    obs.log_ratio = (dn / (d5 - dn)).ln();
                    obs.births = Some(births_t);
                }
                SeriesType::SVR => {
                    let reported = rng.random::<f64>() >= scenario.missing_sd_fraction;
                    let nu = if reported {
                        rng.random_range(0.08..0.25)
                    } else {
                        crate::ingest::SVR_SAMPLING_SD
                    };
                    obs.sampling_sd = reported.then_some(nu);
                    let y = lr + noise * nu * rng.sample::<f64, _>(StandardNormal);
                    obs.log_ratio = y;
                    obs.nmr = nmr_from_log_ratio(y, u);
                }
                s => {
                    let reported = rng.random::<f64>() >= scenario.missing_sd_fraction;
                    let nu = if reported {
                        rng.random_range(0.05..0.25)
                    } else {
                        table.get(s, c.size_category)?
                    };
                    obs.sampling_sd = reported.then_some(nu);
                    let y = lr + noise * survey_noise(&mut rng, nu, g.omega_for(s));
                    obs.log_ratio = y;
                    obs.nmr = nmr_from_log_ratio(y, u);
                }
            }
            if !(obs.nmr > 0.0 && obs.nmr < obs.u5mr) {
                return Err(Error::InvalidState(format!(
                    "generated rate outside support for {} at {}",
                    c.country_id, obs.t
                )));
            }
            observations.push(obs);
            obs_truth.push(lr);
        }
        truths.push(CountryTruth {
            country_id: c.country_id.clone(),
            pattern: patterns[i],
            first_obs: first,
            params: CountryParams {
                lambda,
                eps,
                sigma2_eps: sigma2,
            },
            log_ratio: series_log_r,
        });
    }
    Ok(SynthData {
        observations,
        countries,
        truth: Truth {
            global: g.clone(),
            countries: truths,
            obs_log_ratio: obs_truth,
        },
    })
}

/// Truth record as `parameter, value` rows, using the sampler's parameter
/// names plus `log_ratio[ID][year]` and `obs_log_ratio[i]` rows.
pub fn write_truth<W: Write>(writer: W, truth: &Truth) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "value"])?;
    let g = &truth.global;
    let mut row = |name: String, v: f64| w.write_record([name, format!("{v:?}")]);
    row("beta0".into(), g.beta0)?;
    row("beta1".into(), g.beta1)?;
    row("theta".into(), g.theta)?;
    for (s, v) in crate::model::SURVEY_TYPES.iter().zip(g.omega) {
        row(format!("omega[{s}]"), v)?;
    }
    row("sigma_lambda".into(), g.sigma_lambda)?;
    row("chi".into(), g.chi)?;
    row("psi".into(), g.psi)?;
    for c in &truth.countries {
        let id = &c.country_id;
        row(format!("lambda[{id}]"), c.params.lambda)?;
        for (q, e) in c.params.eps.iter().enumerate() {
            row(format!("eps[{id}][{}]", q + 1), *e)?;
        }
        row(format!("sigma2_eps[{id}]"), c.params.sigma2_eps)?;
        for (y, lr) in &c.log_ratio {
            row(format!("log_ratio[{id}][{y}]"), *lr)?;
        }
    }
    for (i, lr) in truth.obs_log_ratio.iter().enumerate() {
        row(format!("obs_log_ratio[{i}]"), *lr)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a truth file back as a name-to-value map.
pub fn read_truth(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let v: f64 = rec.get(1).unwrap_or("").parse().map_err(|_| Error::Parse {
            line,
            message: "truth value is not a number".into(),
        })?;
        out.insert(rec.get(0).unwrap_or("").to_string(), v);
    }
    Ok(out)
}

/// Write `observations.csv`, `countries.csv` and `truth.csv` into `dir`.
pub fn write_dataset(dir: &Path, data: &SynthData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_observations(&dir.join("observations.csv"), &data.observations)?;
    save_countries(&dir.join("countries.csv"), &data.countries)?;
    write_truth(File::create(dir.join("truth.csv"))?, &data.truth)
}
