//! Out-of-sample validation: recency-based training sets, predictive checks
//! on left-out observations, and training-versus-full estimate comparison.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimates::{
    estimate_country, global_at, global_indices, log_ratio_draws, EstimateConfig,
};
use crate::model::{nmr_from_log_ratio, CountryInput, Observation};
use crate::posterior::FitData;
use crate::rng::{derive_seed, rng_indexed};
use crate::sampler::{self, ChainConfig, PosteriorDraws};
use crate::stats::{mean, median, quantile_sorted, sd};

pub const LEVELS: [f64; 3] = [0.80, 0.90, 0.95];
/// Comparison estimates are split into years up to and after this one.
pub const SPLIT_YEAR: i32 = 2005;
pub const LEFT_OUT_SHARE: f64 = 0.20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSplit {
    /// Training observations; excluded observations stay here unchanged.
    pub training: Vec<Observation>,
    pub left_out: Vec<Observation>,
}

/// Remove the most recent survey series from countries with more than one
/// series, and the most recent 20% (ceiling) of observations from countries
/// with a single series.
pub fn build_training_set(observations: &[Observation]) -> TrainingSplit {
    let mut by_country: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, o) in observations.iter().enumerate().filter(|(_, o)| o.included) {
        by_country.entry(o.country_id.as_str()).or_default().push(i);
    }
    let mut leave = vec![false; observations.len()];
    for (id, idx) in &by_country {
        if idx.len() < 2 {
            warn!("{id} has fewer than two observations; nothing left out");
            continue;
        }
        let mut latest: BTreeMap<&str, (f64, bool)> = BTreeMap::new();
        for &i in idx {
            let o = &observations[i];
            let e = latest
                .entry(o.series_id.as_str())
                .or_insert((f64::NEG_INFINITY, !o.series_type.is_registration()));
            e.0 = e.0.max(o.t);
        }
        if latest.len() > 1 {
            let any_survey = latest.values().any(|(_, s)| *s);
            let pick = latest
                .iter()
                .filter(|(_, (_, s))| *s || !any_survey)
                .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(b.0)))
                .map(|(sid, _)| *sid)
                .unwrap();
            for &i in idx {
                if observations[i].series_id == pick {
                    leave[i] = true;
                }
            }
        } else {
            let mut sorted = idx.clone();
            sorted.sort_by(|a, b| {
                observations[*a]
                    .t
                    .total_cmp(&observations[*b].t)
                    .then(a.cmp(b))
            });
            let n_out = (LEFT_OUT_SHARE * sorted.len() as f64 - 1e-9).ceil() as usize;
            for &i in sorted.iter().rev().take(n_out) {
                leave[i] = true;
            }
        }
    }
    let mut split = TrainingSplit {
        training: Vec::new(),
        left_out: Vec::new(),
    };
    for (o, l) in observations.iter().zip(leave) {
        if l {
            split.left_out.push(o.clone());
        } else {
            split.training.push(o.clone());
        }
    }
    split
}

/// `|n - pred| / pred`.
pub fn absolute_relative_error(observed: f64, predicted: f64) -> Result<f64> {
    if !(predicted > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "relative error undefined for prediction {predicted}"
        )));
    }
    Ok((observed - predicted).abs() / predicted)
}

/// Share of `values` inside `[lower, upper)`.
pub fn coverage(values: &[f64], intervals: &[(f64, f64)]) -> Result<f64> {
    if values.is_empty() || values.len() != intervals.len() {
        return Err(Error::InvalidArgument(format!(
            "coverage needs matching non-empty inputs, got {} values and {} intervals",
            values.len(),
            intervals.len()
        )));
    }
    let inside = values
        .iter()
        .zip(intervals)
        .filter(|(v, (l, u))| **v >= *l && **v < *u)
        .count();
    Ok(inside as f64 / values.len() as f64)
}

/// Predictive summary for one left-out observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub country_id: String,
    pub t: f64,
    pub series_id: String,
    pub observed: f64,
    pub median: f64,
    /// Intervals at [`LEVELS`].
    pub intervals: [(f64, f64); 3],
}

/// Posterior predictive distribution of each left-out observation under a
/// fit: latent log ratio plus the observation's own and non-sampling error.
pub fn predict_left_out(
    countries: &[CountryInput],
    data: &FitData,
    draws: &PosteriorDraws,
    left_out: &[Observation],
    seed: u64,
) -> Result<Vec<Prediction>> {
    let gidx = global_indices(draws)?;
    let mut groups: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in left_out
        .iter()
        .filter(|o| o.included && o.t <= data.horizon)
    {
        groups.entry(o.country_id.as_str()).or_default().push(o);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let per_country: Vec<Vec<Prediction>> = groups
        .par_iter()
        .enumerate()
        .map(|(ci, (id, obs))| -> Result<Vec<Prediction>> {
            let Some(fc) = data.countries.iter().find(|f| f.country_id == *id) else {
                warn!("{id} has no training data; its left-out observations are skipped");
                return Ok(Vec::new());
            };
            let country = countries
                .iter()
                .find(|c| c.country_id == *id)
                .ok_or_else(|| Error::Data(format!("unknown country '{id}'")))?;
            let times: Vec<f64> = obs.iter().map(|o| o.t).collect();
            let us: Vec<f64> = times
                .iter()
                .map(|t| country.u5mr_at(*t))
                .collect::<Result<_>>()?;
            let mut rng = rng_indexed(seed, &format!("predict/{id}"), ci as u64);
            let (lr, _, _) = log_ratio_draws(fc, draws, &times, &us, &mut rng)?;
            let mut out = Vec::with_capacity(obs.len());
            for (j, o) in obs.iter().enumerate() {
                let own = o.own_variance()?;
                let mut pred: Vec<f64> = lr
                    .iter()
                    .enumerate()
                    .map(|(d, traj)| {
                        let g = global_at(draws, &gidx, d);
                        let w = g.omega_for(o.series_type);
                        let z: f64 = rng.sample(StandardNormal);
                        nmr_from_log_ratio(traj[j] + (own + w * w).sqrt() * z, o.u5mr)
                    })
                    .collect();
                pred.sort_by(f64::total_cmp);
                let iv = |level: f64| {
                    let a = 0.5 * (1.0 - level);
                    (quantile_sorted(&pred, a), quantile_sorted(&pred, 1.0 - a))
                };
                out.push(Prediction {
                    country_id: id.to_string(),
                    t: o.t,
                    series_id: o.series_id.clone(),
                    observed: o.nmr,
                    median: quantile_sorted(&pred, 0.5),
                    intervals: [iv(LEVELS[0]), iv(LEVELS[1]), iv(LEVELS[2])],
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_country.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureSummary {
    pub median: f64,
    pub sd: f64,
}

/// Per-set measures: median ARE and coverage at [`LEVELS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetMeasures {
    pub are: f64,
    pub coverage: [f64; 3],
}

fn set_measures(preds: &[&Prediction]) -> Result<SetMeasures> {
    let are: Vec<f64> = preds
        .iter()
        .map(|p| absolute_relative_error(p.observed, p.median))
        .collect::<Result<_>>()?;
    let obs: Vec<f64> = preds.iter().map(|p| p.observed).collect();
    let mut cov = [0.0; 3];
    for (l, c) in cov.iter_mut().enumerate() {
        let iv: Vec<(f64, f64)> = preds.iter().map(|p| p.intervals[l]).collect();
        *c = coverage(&obs, &iv)?;
    }
    Ok(SetMeasures {
        are: median(&are),
        coverage: cov,
    })
}

/// Measures for `n_sets` sets of one randomly chosen left-out observation
/// per country.
pub fn resample_sets(
    predictions: &[Prediction],
    n_sets: usize,
    seed: u64,
) -> Result<Vec<SetMeasures>> {
    let mut by_country: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        by_country.entry(p.country_id.as_str()).or_default().push(p);
    }
    if by_country.is_empty() {
        return Err(Error::InvalidArgument(
            "no left-out observations to validate against".into(),
        ));
    }
    (0..n_sets)
        .map(|s| {
            let mut rng = rng_indexed(seed, "validation-set", s as u64);
            let set: Vec<&Prediction> = by_country
                .values()
                .map(|list| list[rng.random_range(0..list.len())])
                .collect();
            set_measures(&set)
        })
        .collect()
}

fn summarize_measure(v: &[f64]) -> MeasureSummary {
    MeasureSummary {
        median: median(v),
        sd: if v.len() > 1 { sd(v) } else { 0.0 },
    }
}

/// Training-fit estimates compared with full-fit estimates: ARE of the
/// training median against the full median and coverage of the full median
/// by the training intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub n: usize,
    pub are: f64,
    pub coverage: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_left_out: usize,
    pub n_training: usize,
    pub n_sets: usize,
    pub are: MeasureSummary,
    pub coverage: [MeasureSummary; 3],
    /// Up to and including [`SPLIT_YEAR`], then after it.
    pub comparison: [Comparison; 2],
}

pub fn summarize_sets(sets: &[SetMeasures]) -> ([MeasureSummary; 3], MeasureSummary) {
    let are: Vec<f64> = sets.iter().map(|s| s.are).collect();
    let cov = [0, 1, 2]
        .map(|l| summarize_measure(&sets.iter().map(|s| s.coverage[l]).collect::<Vec<_>>()));
    (cov, summarize_measure(&are))
}

/// Compare training and full fits on every fitted country's year grid.
pub fn compare_fits(
    countries: &[CountryInput],
    train: (&FitData, &PosteriorDraws),
    full: (&FitData, &PosteriorDraws),
    config: &EstimateConfig,
) -> Result<[Comparison; 2]> {
    let rows: Vec<Vec<(f64, f64, [bool; 3])>> = countries
        .par_iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let ft = train
                .0
                .countries
                .iter()
                .find(|f| f.country_id == c.country_id)?;
            let ff = full
                .0
                .countries
                .iter()
                .find(|f| f.country_id == c.country_id)?;
            Some((i, c, ft, ff))
        })
        .map(|(i, c, ft, ff)| -> Result<Vec<(f64, f64, [bool; 3])>> {
            let gt = estimate_country(c, Some(ft), train.1, config, i as u64)?;
            let gf = estimate_country(c, Some(ff), full.1, config, i as u64)?;
            let mut out = Vec::new();
            for (j, t) in gf.years.iter().enumerate() {
                let Some(jt) = gt.years.iter().position(|y| y == t) else {
                    continue;
                };
                let target = gf.summary[j].median;
                let mut v: Vec<f64> = gt.trajectories.iter().map(|d| d[jt]).collect();
                v.sort_by(f64::total_cmp);
                let pred = quantile_sorted(&v, 0.5);
                let inside = LEVELS.map(|level| {
                    let a = 0.5 * (1.0 - level);
                    target >= quantile_sorted(&v, a) && target < quantile_sorted(&v, 1.0 - a)
                });
                out.push((*t, absolute_relative_error(target, pred)?, inside));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut parts: [Vec<(f64, [bool; 3])>; 2] = Default::default();
    for (t, are, inside) in rows.into_iter().flatten() {
        let k = if (t - 0.5).round() as i32 <= SPLIT_YEAR {
            0
        } else {
            1
        };
        parts[k].push((are, inside));
    }
    Ok(parts.map(|p| {
        let n = p.len();
        if n == 0 {
            return Comparison {
                n,
                are: f64::NAN,
                coverage: [f64::NAN; 3],
            };
        }
        let are: Vec<f64> = p.iter().map(|x| x.0).collect();
        Comparison {
            n,
            are: median(&are),
            coverage: [0, 1, 2]
                .map(|l| mean(&p.iter().map(|x| x.1[l] as u8 as f64).collect::<Vec<_>>())),
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    pub chains: ChainConfig,
    pub n_sets: usize,
    pub seed: u64,
    pub horizon: f64,
    pub estimate: EstimateConfig,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            chains: ChainConfig::default(),
            n_sets: 100,
            seed: 1,
            horizon: crate::splines::DEFAULT_HORIZON,
            estimate: EstimateConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub report: ValidationReport,
    pub split: TrainingSplit,
    pub predictions: Vec<Prediction>,
    pub sets: Vec<SetMeasures>,
    pub training_draws: PosteriorDraws,
    pub full_draws: PosteriorDraws,
}

/// Fit the training and full data sets and assess the training fit.
pub fn run_validation(
    countries: &[CountryInput],
    observations: &[Observation],
    config: &ValidationConfig,
) -> Result<ValidationOutcome> {
    if config.n_sets == 0 {
        return Err(Error::Config(
            "validation needs at least one resample set".into(),
        ));
    }
    let split = build_training_set(observations);
    let train_data =
        FitData::build_with_span(countries, &split.training, observations, config.horizon)?;
    let full_data = FitData::build(countries, observations, config.horizon)?;
    let mut chains = config.chains.clone();
    chains.master_seed = derive_seed(config.seed, "training-fit");
    let training_draws = sampler::run(&chains, &train_data)?;
    chains.master_seed = derive_seed(config.seed, "full-fit");
    let full_draws = sampler::run(&chains, &full_data)?;
    assess(
        countries,
        split,
        (&train_data, training_draws),
        (&full_data, full_draws),
        config,
    )
}

/// Validation measures from completed training and full fits.
pub fn assess(
    countries: &[CountryInput],
    split: TrainingSplit,
    train: (&FitData, PosteriorDraws),
    full: (&FitData, PosteriorDraws),
    config: &ValidationConfig,
) -> Result<ValidationOutcome> {
    let predictions = predict_left_out(
        countries,
        train.0,
        &train.1,
        &split.left_out,
        derive_seed(config.seed, "predict"),
    )?;
    let sets = resample_sets(&predictions, config.n_sets, config.seed)?;
    let (coverage, are) = summarize_sets(&sets);
    let comparison = compare_fits(
        countries,
        (train.0, &train.1),
        (full.0, &full.1),
        &config.estimate,
    )?;
    let report = ValidationReport {
        n_left_out: split.left_out.iter().filter(|o| o.included).count(),
        n_training: split.training.iter().filter(|o| o.included).count(),
        n_sets: sets.len(),
        are,
        coverage,
        comparison,
    };
    Ok(ValidationOutcome {
        report,
        split,
        predictions,
        sets,
        training_draws: train.1,
        full_draws: full.1,
    })
}

/// Long-format report: `table, measure, statistic, value`.
pub fn write_report<W: Write>(writer: W, r: &ValidationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["table", "measure", "statistic", "value"])?;
    let names = [
        "absolute_relative_error",
        "coverage80",
        "coverage90",
        "coverage95",
    ];
    let left = [r.are, r.coverage[0], r.coverage[1], r.coverage[2]];
    for (n, m) in names.iter().zip(left) {
        w.write_record(["left_out", n, "median", &format!("{:?}", m.median)])?;
        w.write_record(["left_out", n, "sd", &format!("{:?}", m.sd)])?;
    }
    for (label, c) in [("le2005", r.comparison[0]), ("gt2005", r.comparison[1])] {
        let vals = [c.are, c.coverage[0], c.coverage[1], c.coverage[2]];
        for (n, v) in names.iter().zip(vals) {
            w.write_record(["model_comparison", n, label, &format!("{v:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions<W: Write>(writer: W, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "country_id",
        "year",
        "series_id",
        "observed",
        "median",
        "lower80",
        "upper80",
        "lower90",
        "upper90",
        "lower95",
        "upper95",
    ])?;
    for p in preds {
        let mut rec = vec![
            p.country_id.clone(),
            format!("{:?}", p.t),
            p.series_id.clone(),
            format!("{:?}", p.observed),
            format!("{:?}", p.median),
        ];
        for (l, u) in p.intervals {
            rec.push(format!("{l:?}"));
            rec.push(format!("{u:?}"));
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn are_uses_prediction_as_denominator() {
        assert_eq!(absolute_relative_error(10.0, 10.0).unwrap(), 0.0);
        assert!((absolute_relative_error(11.0, 10.0).unwrap() - 0.1).abs() < 1e-12);
        assert!((absolute_relative_error(9.0, 10.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(absolute_relative_error(1.0, 0.0).is_err());
    }

    #[test]
    fn coverage_is_half_open() {
        let iv = [(1.0, 2.0), (1.0, 2.0), (1.0, 2.0)];
        assert!((coverage(&[1.0, 1.5, 2.0], &iv).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(coverage(&[1.2, 1.5, 1.9], &iv).unwrap(), 1.0);
        assert!(coverage(&[], &[]).is_err());
    }
}
