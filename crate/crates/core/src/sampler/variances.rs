//! Updates for the scale parameters: smoothing variances, the intercept SD,
//! non-sampling SDs, and the hierarchical mean and SD of log smoothing
//! variances.
//!
//! Each scale gets a centred slice update and, where the centred move mixes
//! poorly near zero, an extra non-centred update that rescales the effects
//! it governs.

use rand::Rng;
use rand_distr::StandardNormal;

use super::slice::slice_step;
use crate::model::{ParameterState, NORMAL_PRIOR_VAR, SCALE_MAX, SURVEY_TYPES};
use crate::posterior::FitData;

const LOG_WIDTH: f64 = 1.0;

/// Normal full conditional of `chi` given the log smoothing variances and
/// `psi`: returns `(mean, sd)`.
pub fn chi_conditional(log_sigma2: &[f64], psi: f64) -> (f64, f64) {
    let n = log_sigma2.len() as f64;
    let prec = n / (psi * psi) + 1.0 / NORMAL_PRIOR_VAR;
    let mean = log_sigma2.iter().sum::<f64>() / (psi * psi) / prec;
    (mean, prec.sqrt().recip())
}

/// Unnormalised log density of `ls = log sigma2` for a country with
/// fluctuation sum of squares `ss` over `q` differences.
fn smoothing_log_density(ls: f64, q: f64, ss: f64, chi: f64, psi: f64) -> f64 {
    -0.5 * q * ls - 0.5 * ss * (-ls).exp() - 0.5 * ((ls - chi) / psi).powi(2)
}

/// Centred slice update of one country's log smoothing variance.
pub fn update_smoothing_variance<R: Rng + ?Sized>(
    rng: &mut R,
    eps: &[f64],
    sigma2: f64,
    chi: f64,
    psi: f64,
) -> f64 {
    let q = eps.len() as f64;
    let ss: f64 = eps.iter().map(|e| e * e).sum();
    let ls = slice_step(rng, sigma2.ln(), LOG_WIDTH, |ls| {
        smoothing_log_density(ls, q, ss, chi, psi)
    });
    ls.exp()
}

fn log_uniform_scale(eta: f64) -> f64 {
    // uniform prior on exp(eta) in (0, SCALE_MAX), Jacobian exp(eta)
    if eta < SCALE_MAX.ln() {
        eta
    } else {
        f64::NEG_INFINITY
    }
}

pub fn update_variances<R: Rng + ?Sized>(data: &FitData, state: &mut ParameterState, rng: &mut R) {
    let g = state.global.clone();

    // per-country smoothing variances
    for (fc, cp) in data.countries.iter().zip(state.countries.iter_mut()) {
        cp.sigma2_eps = update_smoothing_variance(rng, &cp.eps, cp.sigma2_eps, g.chi, g.psi);

        // non-centred: eps = sigma * eta with eta fixed
        let sigma = cp.sigma2_eps.sqrt();
        let eta: Vec<f64> = cp.eps.iter().map(|e| e / sigma).collect();
        let (mut sag, mut sgg) = (0.0, 0.0);
        for o in &fc.obs {
            let w = 1.0 / o.variance(&g);
            let a = o.y - (g.beta0 + g.beta1 * o.hinge(g.theta) + cp.lambda);
            let gz: f64 = o.z[1..].iter().zip(&eta).map(|(z, e)| z * e).sum();
            sag += w * a * gz;
            sgg += w * gz * gz;
        }
        let ls = slice_step(rng, cp.sigma2_eps.ln(), LOG_WIDTH, |ls| {
            let s = (0.5 * ls).exp();
            s * sag - 0.5 * s * s * sgg - 0.5 * ((ls - g.chi) / g.psi).powi(2)
        });
        cp.sigma2_eps = ls.exp();
        let s = cp.sigma2_eps.sqrt();
        for (e, h) in cp.eps.iter_mut().zip(&eta) {
            *e = s * h;
        }
    }

    // intercept SD, centred
    let lambdas: Vec<f64> = state.countries.iter().map(|c| c.lambda).collect();
    let n_c = lambdas.len() as f64;
    let ssl: f64 = lambdas.iter().map(|l| l * l).sum();
    let eta = slice_step(rng, state.global.sigma_lambda.ln(), LOG_WIDTH, |eta| {
        log_uniform_scale(eta) - n_c * eta - 0.5 * ssl * (-2.0 * eta).exp()
    });
    state.global.sigma_lambda = eta.exp();

    // intercept SD, non-centred: lambda_c = sigma_lambda * zeta_c
    if !data.countries.is_empty() {
        let sl = state.global.sigma_lambda;
        let (mut sag, mut sgg) = (0.0, 0.0);
        for (fc, cp) in data.countries.iter().zip(&state.countries) {
            let zeta = cp.lambda / sl;
            for o in &fc.obs {
                let w = 1.0 / o.variance(&g);
                let rest: f64 = o.z[1..].iter().zip(&cp.eps).map(|(z, e)| z * e).sum();
                let a = o.y - (g.beta0 + g.beta1 * o.hinge(g.theta) + rest);
                sag += w * a * zeta;
                sgg += w * zeta * zeta;
            }
        }
        let eta = slice_step(rng, sl.ln(), LOG_WIDTH, |eta| {
            let s = eta.exp();
            log_uniform_scale(eta) + s * sag - 0.5 * s * s * sgg
        });
        let new_sl = eta.exp();
        for cp in state.countries.iter_mut() {
            cp.lambda *= new_sl / sl;
        }
        state.global.sigma_lambda = new_sl;
    }

    // non-sampling SDs from current residuals
    let mut resid: [Vec<(f64, f64)>; 4] = Default::default();
    for (fc, cp) in data.countries.iter().zip(&state.countries) {
        for o in &fc.obs {
            if let Some(j) = o.series.survey_index() {
                let r = o.y - o.mean(&state.global, cp);
                resid[j].push((o.own_var, r * r));
            }
        }
    }
    for j in 0..SURVEY_TYPES.len() {
        let list = &resid[j];
        let eta = slice_step(rng, state.global.omega[j].ln(), LOG_WIDTH, |eta| {
            let w2 = (2.0 * eta).exp();
            let mut lp = log_uniform_scale(eta);
            for (v, r2) in list {
                let var = v + w2;
                lp += -0.5 * var.ln() - 0.5 * r2 / var;
            }
            lp
        });
        state.global.omega[j] = eta.exp();
    }

    update_smoothing_hyper(state, rng);
}

/// Updates of `chi` (Gibbs) and `psi` (slice), each followed by a
/// non-centred move holding `(log sigma2_c - chi) / psi` fixed.
pub fn update_smoothing_hyper<R: Rng + ?Sized>(state: &mut ParameterState, rng: &mut R) {
    let ls: Vec<f64> = state.countries.iter().map(|c| c.sigma2_eps.ln()).collect();
    let (m, sd) = chi_conditional(&ls, state.global.psi);
    let z: f64 = rng.sample(StandardNormal);
    state.global.chi = m + sd * z;

    let chi = state.global.chi;
    let n = ls.len() as f64;
    let ssd: f64 = ls.iter().map(|l| (l - chi) * (l - chi)).sum();
    let eta = slice_step(rng, state.global.psi.ln(), LOG_WIDTH, |eta| {
        log_uniform_scale(eta) - n * eta - 0.5 * ssd * (-2.0 * eta).exp()
    });
    state.global.psi = eta.exp();

    if state.countries.is_empty() {
        return;
    }
    let stats: Vec<(f64, f64)> = state
        .countries
        .iter()
        .map(|c| (c.eps.len() as f64, c.eps.iter().map(|e| e * e).sum()))
        .collect();
    let psi = state.global.psi;
    let xi: Vec<f64> = ls.iter().map(|l| (l - chi) / psi).collect();
    let eps_density = |chi: f64, psi: f64| -> f64 {
        stats
            .iter()
            .zip(&xi)
            .map(|((q, ss), x)| {
                let l = chi + psi * x;
                -0.5 * q * l - 0.5 * ss * (-l).exp()
            })
            .sum()
    };
    let new_chi = slice_step(rng, chi, LOG_WIDTH, |c| {
        eps_density(c, psi) - 0.5 * c * c / NORMAL_PRIOR_VAR
    });
    let eta = slice_step(rng, psi.ln(), LOG_WIDTH, |eta| {
        log_uniform_scale(eta) + eps_density(new_chi, eta.exp())
    });
    let new_psi = eta.exp();
    state.global.chi = new_chi;
    state.global.psi = new_psi;
    for (c, x) in state.countries.iter_mut().zip(&xi) {
        c.sigma2_eps = (new_chi + new_psi * x).exp();
    }
}
