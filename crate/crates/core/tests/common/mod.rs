//! Shared fixtures and oracles for integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use nmr_core::model::{hinge, CountryInput, Observation, ParameterState, SeriesType, SizeCategory};
use nmr_core::posterior::FitData;
use nmr_core::sampler::{
    effective_sample_size, run_from, ChainConfig, FixedBlocks, PosteriorDraws,
};
use nmr_core::splines::{build_knot_grid, coefficients_from, eval_basis, DifferenceTransform};

/// Two countries with a mix of VR and survey observations.
pub fn toy_two_country() -> (Vec<CountryInput>, Vec<Observation>) {
    let mut countries = Vec::new();
    let mut obs = Vec::new();
    for (ci, id) in ["AAA", "BBB"].iter().enumerate() {
        let u5: BTreeMap<i32, f64> = (1980..=2015)
            .map(|y| {
                (
                    y,
                    160.0 * (-(y - 1980) as f64 / (18.0 + 8.0 * ci as f64)).exp() + 9.0,
                )
            })
            .collect();
        countries.push(CountryInput {
            country_id: id.to_string(),
            name: id.to_string(),
            size_category: SizeCategory::Other,
            u5mr_point: u5,
            u5mr_draws: None,
            births: BTreeMap::new(),
            crisis_adjustments: BTreeMap::new(),
        });
        for j in 0..9 {
            let series = [SeriesType::VR, SeriesType::DHS, SeriesType::MICS][j % 3];
            obs.push(Observation {
                country_id: id.to_string(),
                t: 1982.5 + 3.3 * j as f64,
                nmr: 10.0,
                u5mr: 30.0,
                log_ratio: -0.4
                    + 0.06 * j as f64
                    + 0.15 * ci as f64
                    + 0.05 * ((j * 7 % 5) as f64 - 2.0),
                series_type: series,
                series_id: format!("{id}-{}", series.as_str()),
                sampling_sd: Some(0.08 + 0.01 * j as f64),
                stochastic_sd: Some(0.06 + 0.005 * j as f64),
                births: None,
                included: true,
            });
        }
    }
    (countries, obs)
}

/// Dense Gaussian posterior over `(beta0, beta1, [lambda_c, eps_c...]...)`
/// built from the observation-level model with the cutpoint and variances
/// of `state`, independently of the sampler's factorisation.
pub fn dense_gaussian_posterior(
    countries: &[CountryInput],
    obs: &[Observation],
    state: &ParameterState,
    horizon: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let g = &state.global;
    let mut blocks = Vec::new();
    for c in countries {
        let own: Vec<&Observation> = obs
            .iter()
            .filter(|o| o.included && o.country_id == c.country_id)
            .collect();
        if own.is_empty() {
            continue;
        }
        let first = own.iter().map(|o| o.t).fold(f64::INFINITY, f64::min);
        let grid = build_knot_grid(Some(first), horizon).unwrap();
        let k = grid.n_basis();
        let tr = DifferenceTransform::new(k).unwrap();
        // columns of the map (lambda, eps) -> alpha
        let mut a = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            let mut eps = vec![0.0; k - 1];
            let lambda = if j == 0 { 1.0 } else { 0.0 };
            if j > 0 {
                eps[j - 1] = 1.0;
            }
            let alpha = coefficients_from(lambda, &eps, &tr).unwrap();
            for i in 0..k {
                a[(i, j)] = alpha[i];
            }
        }
        blocks.push((c, own, grid, a));
    }
    let n: usize = 2 + blocks.iter().map(|b| b.3.ncols()).sum::<usize>();
    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    q[(0, 0)] = 0.01;
    q[(1, 1)] = 0.01;
    let mut off = 2;
    for (ci, (c, own, grid, a)) in blocks.iter().enumerate() {
        let k = a.ncols();
        let cp = &state.countries[ci];
        q[(off, off)] += 1.0 / (g.sigma_lambda * g.sigma_lambda);
        for i in 1..k {
            q[(off + i, off + i)] += 1.0 / cp.sigma2_eps;
        }
        for o in own {
            let u = c.u5mr_at(o.t).unwrap();
            let b = DVector::from_vec(eval_basis(grid, o.t).unwrap());
            let z = a.transpose() * b;
            let mut x = DVector::<f64>::zeros(n);
            x[0] = 1.0;
            x[1] = hinge(u, g.theta);
            for i in 0..k {
                x[off + i] = z[i];
            }
            let w = 1.0 / o.variance(g).unwrap();
            q += &x * x.transpose() * w;
            rhs += &x * (w * o.log_ratio);
        }
        off += k;
    }
    let cov = q.try_inverse().unwrap();
    (&cov * rhs, cov)
}

pub struct OracleOutcome {
    pub pass: bool,
    pub detail: String,
}

/// Sample `(beta0, beta1, lambda_1, lambda_2)` with the cutpoint and all
/// variances fixed and compare mean and covariance with the closed form,
/// each within 3 Monte-Carlo standard errors.
pub fn gaussian_oracle(seed: u64) -> OracleOutcome {
    let (countries, obs) = toy_two_country();
    let data = FitData::build(&countries, &obs, 2015.5).unwrap();
    let config = ChainConfig {
        n_chains: 3,
        n_iter: 5000,
        burn_in: 500,
        thin: 1,
        master_seed: seed,
        fixed: FixedBlocks {
            theta: true,
            variances: true,
        },
        ..Default::default()
    };
    let mut init = nmr_core::sampler::init_chain(0, 1, &data, seed);
    init.global.theta = 45.0;
    init.global.omega = [0.1, 0.12, 0.09, 0.2];
    init.global.sigma_lambda = 0.3;
    for (i, c) in init.countries.iter_mut().enumerate() {
        c.sigma2_eps = 0.004 * (1.0 + i as f64);
    }
    let draws = run_from(&config, &data, Some(vec![init.clone(); 3])).unwrap();
    let (mean, cov) = dense_gaussian_posterior(&countries, &obs, &init, 2015.5);
    let k0 = data.countries[0].k();
    let names = ["beta0", "beta1", "lambda[AAA]", "lambda[BBB]"];
    let dense_index = [0, 1, 2, 2 + k0];
    compare_moments(&draws, &names, &dense_index, &mean, &cov)
}

pub fn compare_moments(
    draws: &PosteriorDraws,
    names: &[&str],
    dense_index: &[usize],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> OracleOutcome {
    let cols: Vec<&[f64]> = names
        .iter()
        .map(|n| draws.pooled_by_name(n).unwrap())
        .collect();
    let n = cols[0].len() as f64;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (a, name) in names.iter().enumerate() {
        let m: f64 = cols[a].iter().sum::<f64>() / n;
        let p = draws.param_index(name).unwrap();
        let ess = effective_sample_size(&draws.chains(p))
            .unwrap()
            .unwrap_or(n);
        let se = (cov[(dense_index[a], dense_index[a])] / ess).sqrt();
        let z = (m - mean[dense_index[a]]).abs() / se;
        worst = worst.max(z);
        lines.push(format!("{name}: mean z={z:.2}"));
        for b in 0..=a {
            let mb: f64 = cols[b].iter().sum::<f64>() / n;
            let c: f64 = cols[a]
                .iter()
                .zip(cols[b])
                .map(|(x, y)| (x - m) * (y - mb))
                .sum::<f64>()
                / (n - 1.0);
            let (ia, ib) = (dense_index[a], dense_index[b]);
            let exact = cov[(ia, ib)];
            let se = ((cov[(ia, ia)] * cov[(ib, ib)] + exact * exact) / ess.min(n)).sqrt();
            let z = (c - exact).abs() / se;
            worst = worst.max(z);
        }
    }
    OracleOutcome {
        pass: worst < 3.0,
        detail: format!(
            "max |z| = {worst:.2} over means and covariances ({})",
            lines.join(", ")
        ),
    }
}
