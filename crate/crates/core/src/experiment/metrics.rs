use nalgebra::DMatrix;

use crate::scalar::Real;

/// Mean over rows of `‖truth_i − est_i‖² / ‖truth_i‖²`, in percent. Rows
/// whose truth is zero are skipped and counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeError {
    pub percent: f64,
    pub excluded: usize,
}

pub fn relative_error_rows<T: Real>(truth: &DMatrix<T>, est: &DMatrix<T>) -> RelativeError {
    assert_eq!(truth.shape(), est.shape(), "relative error operands differ in shape");
    let mut sum = 0.0;
    let mut used = 0;
    for i in 0..truth.nrows() {
        let t = truth.row(i);
        let den = t.norm_squared().to_f64_lossy();
        if den == 0.0 {
            continue;
        }
        sum += (t - est.row(i)).norm_squared().to_f64_lossy() / den;
        used += 1;
    }
    RelativeError {
        percent: if used == 0 { f64::NAN } else { 100.0 * sum / used as f64 },
        excluded: truth.nrows() - used,
    }
}

/// Posterior mean error against the true parameters.
pub fn relative_error_param<T: Real>(u_true: &DMatrix<T>, mu_post: &DMatrix<T>) -> RelativeError {
    relative_error_rows(u_true, mu_post)
}

/// Observation error of the decoder evaluated at the posterior mean.
pub fn relative_error_obs<T: Real>(y: &DMatrix<T>, y_pred: &DMatrix<T>) -> RelativeError {
    relative_error_rows(y, y_pred)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    /// Percentage of all (sample, node) pairs inside the band.
    pub percent: f64,
    /// Whether every node of a sample lies inside its band.
    pub per_sample: Vec<bool>,
}

/// Share of entries with `|u − μ| ≤ k σ`.
pub fn feasibility_rate<T: Real>(u_true: &DMatrix<T>, mu: &DMatrix<T>, sigma: &DMatrix<T>, k_std: T) -> Feasibility {
    assert_eq!(u_true.shape(), mu.shape());
    assert_eq!(u_true.shape(), sigma.shape());
    let mut inside = 0usize;
    let per_sample = (0..u_true.nrows())
        .map(|i| {
            let mut all = true;
            for j in 0..u_true.ncols() {
                let ok = (u_true[(i, j)] - mu[(i, j)]).abs() <= k_std * sigma[(i, j)];
                inside += ok as usize;
                all &= ok;
            }
            all
        })
        .collect();
    let total = u_true.len().max(1);
    Feasibility {
        percent: 100.0 * inside as f64 / total as f64,
        per_sample,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::standard_normal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn error_extremes() {
        let u = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        assert_eq!(relative_error_param(&u, &u).percent, 0.0);
        assert_eq!(relative_error_param(&u, &DMatrix::zeros(2, 3)).percent, 100.0);
        let y = DMatrix::from_row_slice(1, 2, &[0.3, 0.4]);
        assert_eq!(relative_error_obs(&y, &y).percent, 0.0);
        assert_eq!(relative_error_obs(&y, &DMatrix::zeros(1, 2)).percent, 100.0);
    }

    #[test]
    fn zero_rows_excluded() {
        let u = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let e = relative_error_param(&u, &DMatrix::from_element(2, 2, 0.5));
        assert_eq!(e.excluded, 1);
        assert!((e.percent - 25.0).abs() < 1e-12);
    }

    #[test]
    fn feasibility_extremes() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mu = DMatrix::zeros(2, 2);
        let f = feasibility_rate(&u, &mu, &DMatrix::from_element(2, 2, f64::INFINITY), 3.0);
        assert_eq!(f.percent, 100.0);
        assert_eq!(f.per_sample, vec![true, true]);
        let f = feasibility_rate(&u, &mu, &DMatrix::zeros(2, 2), 3.0);
        assert_eq!(f.percent, 0.0);
        assert_eq!(f.per_sample, vec![false, false]);
    }

    #[test]
    fn calibrated_gaussian_hits_three_sigma_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, d) = (400, 250);
        let mu = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = DMatrix::from_fn(m, d, |_, _| rng.random_range(0.1..2.0));
        let mut u = mu.clone();
        for i in 0..m {
            let z = standard_normal::<f64, _>(&mut rng, d);
            for j in 0..d {
                u[(i, j)] += sigma[(i, j)] * z[j];
            }
        }
        let f = feasibility_rate(&u, &mu, &sigma, 3.0);
        // P(|Z| ≤ 3) with binomial standard error over 10⁵ entries
        let p = 0.997_300_203_936_74;
        let se = 100.0 * (p * (1.0 - p) / (m * d) as f64).sqrt();
        assert!((f.percent - 100.0 * p).abs() < 4.0 * se, "{}", f.percent);
    }

    proptest! {
        #[test]
        fn error_is_scale_invariant(seed in 0u64..1000, c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-2.0..2.0));
            let mu = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-2.0..2.0));
            let a = relative_error_param(&u, &mu).percent;
            let b = relative_error_param(&(&u * c), &(&mu * c)).percent;
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }

        #[test]
        fn feasibility_monotone_in_k(seed in 0u64..1000, k1 in 0.0..5.0f64, dk in 0.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = DMatrix::from_fn(5, 8, |_, _| rng.random_range(-2.0..2.0));
            let mu = DMatrix::from_fn(5, 8, |_, _| rng.random_range(-2.0..2.0));
            let s = DMatrix::from_fn(5, 8, |_, _| rng.random_range(0.0..1.0));
            let a = feasibility_rate(&u, &mu, &s, k1).percent;
            let b = feasibility_rate(&u, &mu, &s, k1 + dk).percent;
            prop_assert!(b >= a);
        }
    }
}
