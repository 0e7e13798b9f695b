//! Convergence diagnostics: potential scale reduction and effective sample
//! size.

use crate::error::{Error, Result};
use crate::stats::{mean, variance};

pub const MIN_RHAT_DRAWS: usize = 10;
pub const MIN_ESS_DRAWS: usize = 50;

/// Gelman-Rubin potential scale reduction from the between- and
/// within-chain variances.
///
/// Returns `+inf` when the within-chain variance is zero. The finite-sample
/// estimate can dip below one when chains agree better than expected; it is
/// reported as one in that case.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < MIN_RHAT_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "R-hat needs at least {MIN_RHAT_DRAWS} draws per chain, got {n}"
        )));
    }
    let trimmed: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = trimmed.iter().map(|c| mean(c)).collect();
    let w = mean(&trimmed.iter().map(|c| variance(c)).collect::<Vec<_>>());
    if !(w > 0.0) {
        return Ok(f64::INFINITY);
    }
    let nf = n as f64;
    let b_over_n = variance(&means);
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    Ok((var_plus / w).sqrt().max(1.0))
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (x[i] - m) * (x[i + lag] - m);
    }
    s / n as f64
}

/// Effective sample size with Geyer's initial positive sequence, combining
/// chains through the within-chain autocovariances and the pooled variance
/// estimate.
///
/// Returns `Ok(None)` for a constant series (ESS undefined).
pub fn effective_sample_size(chains: &[&[f64]]) -> Result<Option<f64>> {
    let m = chains.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no chains".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < MIN_ESS_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "ESS needs at least {MIN_ESS_DRAWS} draws per chain, got {n}"
        )));
    }
    let trimmed: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let nf = n as f64;
    let acov0: Vec<f64> = trimmed.iter().map(|c| autocovariance(c, 0)).collect();
    let w = mean(&acov0) * nf / (nf - 1.0);
    let var_plus = if m > 1 {
        let means: Vec<f64> = trimmed.iter().map(|c| mean(c)).collect();
        (nf - 1.0) / nf * w + variance(&means)
    } else {
        mean(&acov0)
    };
    if !(var_plus > 0.0) || !(w > 0.0) {
        return Ok(None);
    }
    let rho = |lag: usize| -> f64 {
        let ac = mean(
            &trimmed
                .iter()
                .map(|c| autocovariance(c, lag))
                .collect::<Vec<_>>(),
        );
        if m > 1 {
            1.0 - (w - ac) / var_plus
        } else {
            ac / var_plus
        }
    };
    // pairs (rho_{2k} + rho_{2k+1}) summed while positive, kept monotone
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        sum += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1e-12);
    let total = (m * n) as f64;
    Ok(Some((total / tau).min(total)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn identical_chains_give_one() {
        let a = normals(1, 200);
        assert_eq!(gelman_rubin(&[&a, &a, &a]).unwrap(), 1.0);
    }

    #[test]
    fn offset_chains_diverge() {
        let a = normals(1, 200);
        let b: Vec<f64> = normals(2, 200).iter().map(|x| x + 10.0).collect();
        // B/n = 50, W ~ 1, so R-hat ~ sqrt(51)
        let r = gelman_rubin(&[&a, &b]).unwrap();
        assert!(r > 6.0 && r < 8.5, "{r}");
    }

    #[test]
    fn zero_within_variance_is_infinite() {
        let a = vec![1.0; 20];
        let b = vec![2.0; 20];
        assert_eq!(gelman_rubin(&[&a, &b]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn rhat_preconditions() {
        let a = normals(1, 9);
        assert!(gelman_rubin(&[&a, &a]).is_err());
        let b = normals(1, 100);
        assert!(gelman_rubin(&[&b]).is_err());
    }

    #[test]
    fn iid_chains_pass_threshold() {
        let mut pass = 0;
        for rep in 0..100 {
            let a = normals(1000 + 2 * rep, 1000);
            let b = normals(1001 + 2 * rep, 1000);
            if gelman_rubin(&[&a, &b]).unwrap() < 1.05 {
                pass += 1;
            }
        }
        assert!(pass >= 95, "{pass}/100");
    }

    #[test]
    fn iid_ess_near_n() {
        // per replicate at n = 5000; average over replicates at n = 1000
        let mut within = 0;
        for rep in 0..100 {
            let x = normals(500 + rep, 5000);
            let ess = effective_sample_size(&[&x]).unwrap().unwrap();
            assert!(ess <= 5000.0 * (1.0 + 1e-12));
            if (ess - 5000.0).abs() <= 750.0 {
                within += 1;
            }
        }
        assert!(within >= 95, "{within}/100 within 15%");
        let mut total = 0.0;
        for rep in 0..100 {
            let x = normals(900 + rep, 1000);
            total += effective_sample_size(&[&x]).unwrap().unwrap();
        }
        let avg = total / 100.0;
        assert!((avg - 1000.0).abs() <= 150.0, "mean ESS {avg}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        let rho: f64 = 0.9;
        let n = 20_000;
        let expect = n as f64 * (1.0 - rho) / (1.0 + rho);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut x = vec![0.0; n];
        let innov = (1.0 - rho * rho).sqrt();
        x[0] = StandardNormal.sample(&mut rng);
        for i in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[i] = rho * x[i - 1] + innov * z;
        }
        let ess = effective_sample_size(&[&x]).unwrap().unwrap();
        assert!(
            (ess - expect).abs() / expect < 0.25,
            "ess {ess} vs {expect}"
        );
    }

    #[test]
    fn ess_edge_cases() {
        let x = normals(3, 49);
        assert!(effective_sample_size(&[&x]).is_err());
        let c = vec![2.0; 100];
        assert_eq!(effective_sample_size(&[&c]).unwrap(), None);
    }
}
