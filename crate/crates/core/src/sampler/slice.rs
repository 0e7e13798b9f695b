//! Univariate slice sampling with stepping out and shrinkage.

use rand::Rng;

const MAX_STEPS: usize = 64;
const MAX_SHRINK: usize = 200;

/// One slice-sampling update of `x0` under the unnormalised log density
/// `log_density`, which may return `-inf` outside the support.
pub fn slice_step<R, F>(rng: &mut R, x0: f64, width: f64, mut log_density: F) -> f64
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> f64,
{
    let f0 = log_density(x0);
    if !f0.is_finite() {
        return x0;
    }
    let level = f0 + rng.random::<f64>().ln();
    let u: f64 = rng.random();
    let mut lo = x0 - width * u;
    let mut hi = lo + width;
    let j = (rng.random::<f64>() * MAX_STEPS as f64).floor() as usize;
    let mut k = MAX_STEPS - 1 - j;
    let mut jj = j;
    while jj > 0 && log_density(lo) > level {
        lo -= width;
        jj -= 1;
    }
    while k > 0 && log_density(hi) > level {
        hi += width;
        k -= 1;
    }
    for _ in 0..MAX_SHRINK {
        let x1 = lo + rng.random::<f64>() * (hi - lo);
        if log_density(x1) > level {
            return x1;
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
    }
    x0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use statrs::distribution::{ContinuousCDF, LogNormal};

    #[test]
    fn leaves_lognormal_invariant() {
        // target on x > 0: LogNormal(mu=0.3, sigma=0.7); sampled on log scale
        let (mu, sigma) = (0.3, 0.7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut eta: f64 = 0.0;
        let thin = 10;
        let n = 10_000;
        let mut draws = Vec::with_capacity(n);
        for i in 0..n * thin + 500 {
            // density of eta = log x is Normal(mu, sigma)
            eta = slice_step(&mut rng, eta, 1.0, |e| -0.5 * ((e - mu) / sigma).powi(2));
            if i >= 500 && (i - 500) % thin == 0 {
                draws.push(eta.exp());
            }
        }
        draws.sort_by(f64::total_cmp);
        let target = LogNormal::new(mu, sigma).unwrap();
        let nf = draws.len() as f64;
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let c = target.cdf(*x);
                (c - i as f64 / nf)
                    .abs()
                    .max(((i + 1) as f64 / nf - c).abs())
            })
            .fold(0.0, f64::max);
        // 95% Kolmogorov-Smirnov critical value
        let crit = 1.358 / nf.sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }

    #[test]
    fn respects_bounded_support() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut x = 0.5;
        for _ in 0..2000 {
            x = slice_step(&mut rng, x, 2.0, |v| {
                if (0.0..1.0).contains(&v) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            });
            assert!((0.0..1.0).contains(&x));
        }
    }
}
