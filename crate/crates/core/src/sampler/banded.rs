//! Symmetric positive-definite matrices with bandwidth 3 (cubic B-spline
//! Gram structure), stored by rows as `[i][d] = A(i, i - d)`.

pub const BW: usize = 3;

pub type Band = Vec<[f64; BW + 1]>;

/// In-place Cholesky factor `A = L L'`; `None` if `A` is not positive
/// definite.
pub fn cholesky(a: &Band) -> Option<Band> {
    let n = a.len();
    let mut l: Band = vec![[0.0; BW + 1]; n];
    for i in 0..n {
        let lo = i.saturating_sub(BW);
        for j in lo..=i {
            let mut s = a[i][i - j];
            for k in i.saturating_sub(BW).max(j.saturating_sub(BW))..j {
                s -= l[i][i - k] * l[j][j - k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][0] = s.sqrt();
            } else {
                l[i][i - j] = s / l[j][0];
            }
        }
    }
    Some(l)
}

/// Solve `L y = x` in place.
pub fn forward(l: &Band, x: &mut [f64]) {
    for i in 0..x.len() {
        let mut s = x[i];
        for d in 1..=BW.min(i) {
            s -= l[i][d] * x[i - d];
        }
        x[i] = s / l[i][0];
    }
}

/// Solve `L' y = x` in place.
pub fn backward(l: &Band, x: &mut [f64]) {
    let n = x.len();
    for i in (0..n).rev() {
        let mut s = x[i];
        for d in 1..=BW {
            if i + d < n {
                s -= l[i + d][d] * x[i + d];
            }
        }
        x[i] = s / l[i][0];
    }
}

/// Solve `A y = x` in place given the factor of `A`.
pub fn solve(l: &Band, x: &mut [f64]) {
    forward(l, x);
    backward(l, x);
}

/// `L x`.
pub fn lower_mul(l: &Band, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| (0..=BW.min(i)).map(|d| l[i][d] * x[i - d]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    fn random_band(n: usize, rng: &mut impl Rng) -> (Band, DMatrix<f64>) {
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for d in 1..=BW.min(i) {
                let v = rng.random_range(-0.5..0.5);
                dense[(i, i - d)] = v;
                dense[(i - d, i)] = v;
            }
            dense[(i, i)] = 2.5 + rng.random::<f64>();
        }
        let band = (0..n)
            .map(|i| {
                let mut r = [0.0; BW + 1];
                for d in 0..=BW.min(i) {
                    r[d] = dense[(i, i - d)];
                }
                r
            })
            .collect();
        (band, dense)
    }

    #[test]
    fn matches_dense_factor_and_solve() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 4, 7, 30] {
            let (band, dense) = random_band(n, &mut rng);
            let l = cholesky(&band).unwrap();
            let dl = dense.clone().cholesky().unwrap().l();
            for i in 0..n {
                for d in 0..=BW.min(i) {
                    assert!((l[i][d] - dl[(i, i - d)]).abs() < 1e-12);
                }
            }
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = x.clone();
            solve(&l, &mut y);
            let back = &dense * DVector::from_vec(y);
            for i in 0..n {
                assert!((back[i] - x[i]).abs() < 1e-12);
            }
            let lx = lower_mul(&l, &x);
            let dx = &dl * DVector::from_vec(x.clone());
            for i in 0..n {
                assert!((lx[i] - dx[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let band: Band = vec![[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]];
        assert!(cholesky(&band).is_none());
    }
}
