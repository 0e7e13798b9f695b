use std::collections::BTreeMap;

use nmr_core::estimates::{
    combine_with_u5mr, estimate_all, estimate_country, expected_vs_estimated, log_ratio_draws,
    project_coefficients, simulate_no_data_country, EstimateConfig, NoDataScale,
};
use nmr_core::ingest::{preprocess, PreprocessConfig};
use nmr_core::model::{
    log_f, nmr_from_log_ratio, CountryInput, GlobalParams, Observation, ParameterState, SeriesType,
};
use nmr_core::posterior::FitData;
use nmr_core::rng::rng_indexed;
use nmr_core::sampler::{run, ChainConfig, PosteriorDraws};
use nmr_core::stats::{quantile, sd, variance};
use nmr_core::synth::{default_truth, generate, Scenario};

/// Single-chain draws repeating the given states in order.
fn draws_from(layout: Vec<(String, usize)>, states: &[ParameterState]) -> PosteriorDraws {
    let flat: Vec<Vec<f64>> = states
        .iter()
        .map(|s| {
            let g = &s.global;
            let mut v = vec![g.beta0, g.beta1, g.theta];
            v.extend(g.omega);
            v.extend([g.sigma_lambda, g.chi, g.psi]);
            for c in &s.countries {
                v.push(c.lambda);
                v.extend(&c.eps);
                v.push(c.sigma2_eps);
            }
            v
        })
        .collect();
    let n = states.len();
    let p = flat[0].len();
    let mut values = Vec::with_capacity(n * p);
    for j in 0..p {
        values.extend(flat.iter().map(|v| v[j]));
    }
    PosteriorDraws::from_parts(layout, 1, n, (1..=n).collect(), values).unwrap()
}

fn country(id: &str) -> CountryInput {
    CountryInput {
        country_id: id.into(),
        name: id.into(),
        size_category: nmr_core::model::SizeCategory::Other,
        u5mr_point: (1950..=2015)
            .map(|y| (y, 150.0 * (-(y - 1950) as f64 / 30.0).exp() + 8.0))
            .collect(),
        u5mr_draws: None,
        births: BTreeMap::new(),
        crisis_adjustments: BTreeMap::new(),
    }
}

fn global(sigma_lambda: f64, chi: f64) -> GlobalParams {
    GlobalParams {
        sigma_lambda,
        chi,
        ..default_truth()
    }
}

#[test]
fn one_step_projection_sd() {
    let mut rng = rng_indexed(3, "proj", 0);
    let steps: Vec<f64> = (0..3000)
        .map(|_| {
            let a = project_coefficients(&[0.2, 0.3], 0.01, 3, &mut rng);
            a[2] - a[1]
        })
        .collect();
    assert!((sd(&steps) / 0.1 - 1.0).abs() < 0.05);
}

#[test]
fn projection_variance_grows_linearly() {
    let mut rng = rng_indexed(3, "proj", 1);
    let sims: Vec<Vec<f64>> = (0..20_000)
        .map(|_| project_coefficients(&[0.0], 0.04, 6, &mut rng))
        .collect();
    for j in 1..6 {
        let v = variance(&sims.iter().map(|a| a[j]).collect::<Vec<_>>());
        assert!((v / (0.04 * j as f64) - 1.0).abs() < 0.06, "step {j}: {v}");
    }
}

#[test]
fn no_data_without_noise_is_expected_line() {
    let c = country("ZZZ");
    let states: Vec<ParameterState> = (0..50)
        .map(|_| ParameterState {
            global: global(0.0, -1e3),
            countries: vec![],
        })
        .collect();
    let draws = draws_from(vec![], &states);
    let g = estimate_country(&c, None, &draws, &EstimateConfig::default(), 0).unwrap();
    assert_eq!(g.years.first(), Some(&1990.5));
    for (j, t) in g.years.iter().enumerate() {
        let u = c.u5mr_at(*t).unwrap();
        let tr = &default_truth();
        let expect = nmr_from_log_ratio(log_f(u, tr.beta0, tr.beta1, tr.theta).unwrap(), u);
        for d in &g.trajectories {
            assert!((d[j] - expect).abs() < 1e-12);
        }
        assert!((g.summary[j].expected_nmr - expect).abs() < 1e-12);
    }
    let chk = expected_vs_estimated(&g);
    for r in &chk.ratios {
        assert!((r.median - 1.0).abs() < 1e-12);
    }
    assert!(!chk.flagged);
}

#[test]
fn no_data_multiplier_is_centred_and_widens() {
    let c = country("ZZZ");
    let states: Vec<ParameterState> = (0..20_000)
        .map(|_| ParameterState {
            global: global(0.2, -2.0),
            countries: vec![],
        })
        .collect();
    let draws = draws_from(vec![], &states);
    let g = estimate_country(&c, None, &draws, &EstimateConfig::default(), 0).unwrap();
    let mut widths = Vec::new();
    for j in (0..g.years.len()).step_by(5) {
        let lp: Vec<f64> = g
            .log_ratio
            .iter()
            .zip(&g.log_expected)
            .map(|(r, e)| r[j] - e[j])
            .collect();
        assert!(
            quantile(&lp, 0.5).abs() < 0.01,
            "median log multiplier {}",
            quantile(&lp, 0.5)
        );
        widths.push(quantile(&lp, 0.975) - quantile(&lp, 0.025));
    }
    for w in widths.windows(2) {
        assert!(w[1] > w[0], "{widths:?}");
    }
}

#[test]
fn no_data_increment_scales() {
    let g = global(0.0, -3.0);
    let mut rng = rng_indexed(5, "scale", 0);
    let recipe: Vec<f64> = (0..5000)
        .map(|_| {
            let a = simulate_no_data_country(&g, 3, NoDataScale::Recipe, &mut rng);
            a[1] - a[0]
        })
        .collect();
    let model: Vec<f64> = (0..5000)
        .map(|_| {
            let a = simulate_no_data_country(&g, 3, NoDataScale::ModelConsistent, &mut rng);
            a[1] - a[0]
        })
        .collect();
    assert!((sd(&recipe) / (-3.0f64).exp() - 1.0).abs() < 0.05);
    assert!((sd(&model) / (-1.5f64).exp() - 1.0).abs() < 0.05);
}

#[test]
fn identical_u5mr_draws_match_point_series() {
    let mut c = country("AAA");
    let years: Vec<f64> = (1990..=2015).map(|y| y as f64 + 0.5).collect();
    let lr: Vec<Vec<f64>> = (0..200)
        .map(|d| years.iter().map(|_| -0.3 + 0.001 * d as f64).collect())
        .collect();
    let mut rng = rng_indexed(1, "c", 0);
    let point = combine_with_u5mr(&lr, &years, &c, &mut rng).unwrap();
    c.u5mr_draws = Some(vec![c.u5mr_point.values().copied().collect(); 7]);
    let mut rng = rng_indexed(1, "c", 0);
    let paired = combine_with_u5mr(&lr, &years, &c, &mut rng).unwrap();
    assert_eq!(point, paired);
}

#[test]
fn crisis_adjustment_is_additive() {
    let mut c = country("AAA");
    let years: Vec<f64> = (1990..=2015).map(|y| y as f64 + 0.5).collect();
    let lr: Vec<Vec<f64>> = (0..300)
        .map(|d| years.iter().map(|_| -0.5 + 0.002 * d as f64).collect())
        .collect();
    let base = combine_with_u5mr(&lr, &years, &c, &mut rng_indexed(1, "c", 0)).unwrap();
    c.crisis_adjustments.insert(2010, 1.0);
    let adj = combine_with_u5mr(&lr, &years, &c, &mut rng_indexed(1, "c", 0)).unwrap();
    let j = years.iter().position(|t| *t == 2010.5).unwrap();
    let med = |v: &[Vec<f64>], j: usize| quantile(&v.iter().map(|d| d[j]).collect::<Vec<_>>(), 0.5);
    assert!((med(&adj, j) - med(&base, j) - 1.0).abs() < 1e-12);
    assert_eq!(med(&adj, j + 1), med(&base, j + 1));
}

#[test]
fn missing_u5mr_year_is_fatal() {
    let mut c = country("AAA");
    c.u5mr_point.remove(&2001);
    let years = vec![2000.5, 2001.5];
    let lr = vec![vec![0.0, 0.0]];
    assert!(combine_with_u5mr(&lr, &years, &c, &mut rng_indexed(1, "c", 0)).is_err());
    let short = vec![vec![0.0]];
    let years = vec![2000.5, 2002.5];
    assert!(
        combine_with_u5mr(&short, &years, &country("AAA"), &mut rng_indexed(1, "c", 0)).is_err()
    );
}

/// Desk-scale synthetic fit plus hand-made countries whose multiplier is
/// constant: `(id, multiplier)`.
fn fitted_with_outliers(
    multipliers: &[(&str, f64)],
) -> (Vec<CountryInput>, FitData, PosteriorDraws) {
    let data = generate(&Scenario::default(), 21).unwrap();
    let pre = preprocess(
        &data.observations,
        &data.countries,
        &PreprocessConfig::default(),
    )
    .unwrap();
    let mut countries = pre.countries;
    let mut obs = pre.observations;
    let tr = default_truth();
    for (i, (id, m)) in multipliers.iter().enumerate() {
        let mut c = countries[0].clone();
        c.country_id = id.to_string();
        c.u5mr_point = (1950..=2015)
            .map(|y| (y, 140.0 * (-(y - 1950) as f64 / 40.0).exp() + 30.0))
            .collect();
        let mut rng = rng_indexed(21, "outlier", i as u64);
        for y in 1980..=2014 {
            let t = y as f64 + 0.5;
            let u = c.u5mr_at(t).unwrap();
            let lr = log_f(u, tr.beta0, tr.beta1, tr.theta).unwrap() + m.ln();
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            let y_obs = lr + 0.03 * z;
            obs.push(Observation {
                country_id: id.to_string(),
                t,
                nmr: nmr_from_log_ratio(y_obs, u),
                u5mr: u,
                log_ratio: y_obs,
                series_type: SeriesType::VR,
                series_id: format!("{id}-VR"),
                sampling_sd: None,
                stochastic_sd: Some(0.03),
                births: None,
                included: true,
            });
        }
        countries.push(c);
    }
    let fit = FitData::build(&countries, &obs, 2015.5).unwrap();
    let cfg = ChainConfig {
        n_iter: 3000,
        burn_in: 1500,
        thin: 3,
        master_seed: 21,
        ..Default::default()
    };
    let draws = run(&cfg, &fit).unwrap();
    (countries, fit, draws)
}

#[test]
fn fitted_estimates_behave() {
    let (countries, fit, draws) =
        fitted_with_outliers(&[("HIGH", 1.5), ("MILD", 1.2), ("LOW", 0.6)]);
    let config = EstimateConfig::default();
    let grids = estimate_all(&countries, &fit, &draws, &config).unwrap();
    assert_eq!(grids.len(), countries.len());

    for (g, c) in grids.iter().zip(&countries) {
        for (j, s) in g.summary.iter().enumerate() {
            assert!(s.lower <= s.median && s.median <= s.upper);
            let u = c.u5mr_at(g.years[j]).unwrap();
            assert!(g.trajectories.iter().all(|d| d[j] > 0.0 && d[j] < u));
        }
    }

    // a multiplier m on the ratio gives m (1 + f) / (1 + m f) on the NMR
    // scale, with f the expected ratio in 2015
    let tr = default_truth();
    for (id, m) in [("HIGH", 1.5), ("MILD", 1.2), ("LOW", 0.6)] {
        let g = grids.iter().find(|g| g.country_id == id).unwrap();
        let c = countries.iter().find(|c| c.country_id == id).unwrap();
        let f = log_f(c.u5mr_at(2015.5).unwrap(), tr.beta0, tr.beta1, tr.theta)
            .unwrap()
            .exp();
        let oracle = m * (1.0 + f) / (1.0 + m * f);
        let chk = expected_vs_estimated(g);
        assert!(
            (chk.final_ratio.median - oracle).abs() < 0.05 * oracle,
            "{id}: {:?} vs {oracle}",
            chk.final_ratio
        );
        let last = g.years.len() - 1;
        let p: Vec<f64> = g
            .log_ratio
            .iter()
            .zip(&g.log_expected)
            .map(|(r, e)| (r[last] - e[last]).exp())
            .collect();
        assert!(
            (quantile(&p, 0.5) / m - 1.0).abs() < 0.08,
            "{id}: multiplier {}",
            quantile(&p, 0.5)
        );
        if id != "MILD" {
            assert!(chk.flagged, "{id}: {:?}", chk.final_ratio);
        }
    }

    // projection continuity: up to the last observation the curve does not
    // depend on the projection stream; past the last active knot it does
    let fc = fit
        .countries
        .iter()
        .find(|f| f.grid.last_active_basis(f.last_obs_t().unwrap()).unwrap() + 2 < f.k())
        .expect("a country whose data end before the horizon");
    let c = countries
        .iter()
        .find(|c| c.country_id == fc.country_id)
        .unwrap();
    let last = fc.last_obs_t().unwrap();
    let t = [last - 3.0, last];
    let us: Vec<f64> = t.iter().map(|t| c.u5mr_at(*t).unwrap()).collect();
    let (a, _, _) = log_ratio_draws(fc, &draws, &t, &us, &mut rng_indexed(1, "p", 0)).unwrap();
    let (b, _, _) = log_ratio_draws(fc, &draws, &t, &us, &mut rng_indexed(2, "p", 0)).unwrap();
    assert_eq!(a, b);
    let t2 = [2015.5];
    let u2 = [c.u5mr_at(2015.5).unwrap()];
    let (a, _, _) = log_ratio_draws(fc, &draws, &t2, &u2, &mut rng_indexed(1, "p", 0)).unwrap();
    let (b, _, _) = log_ratio_draws(fc, &draws, &t2, &u2, &mut rng_indexed(2, "p", 0)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn crisis_adjustments_do_not_touch_the_fit() {
    let s = Scenario {
        full_vr: 2,
        mixed: 2,
        survey_only: 2,
        none: 0,
        ..Default::default()
    };
    let data = generate(&s, 4).unwrap();
    let pre = preprocess(
        &data.observations,
        &data.countries,
        &PreprocessConfig::default(),
    )
    .unwrap();
    let mut with_crisis = pre.countries.clone();
    with_crisis[0].crisis_adjustments.insert(2005, 3.0);
    let cfg = ChainConfig {
        n_iter: 400,
        burn_in: 200,
        thin: 2,
        ..Default::default()
    };
    let a = run(
        &cfg,
        &FitData::build(&pre.countries, &pre.observations, 2015.5).unwrap(),
    )
    .unwrap();
    let b = run(
        &cfg,
        &FitData::build(&with_crisis, &pre.observations, 2015.5).unwrap(),
    )
    .unwrap();
    assert_eq!(a, b);
}
