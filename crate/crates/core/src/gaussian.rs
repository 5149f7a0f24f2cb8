//! Multivariate Gaussian densities in full, Cholesky, or diagonal form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::linalg::{chol_inverse, chol_log_det, chol_solve, dense_cholesky, symmetrize};
use crate::scalar::{standard_normal, Real};

/// Covariance storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T: Real> {
    /// Dense matrix with its lower Cholesky factor cached.
    Full { cov: DMatrix<T>, chol: DMatrix<T> },
    /// Lower-triangular factor `L` with `Γ = L Lᵀ`.
    Cholesky(DMatrix<T>),
    /// Variances of independent coordinates.
    Diagonal(DVector<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity<T: Real> {
    mean: DVector<T>,
    cov: Covariance<T>,
    log_det: T,
}

impl<T: Real> GaussianDensity<T> {
    pub fn full(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        check_len("covariance rows", mean.len(), cov.nrows())?;
        check_len("covariance columns", mean.len(), cov.ncols())?;
        let cov = symmetrize(&cov);
        let chol = dense_cholesky(&cov)
            .ok_or_else(|| Error::Construction("covariance is not positive definite".into()))?;
        let log_det = chol_log_det(&chol);
        Ok(Self {
            mean,
            cov: Covariance::Full { cov, chol },
            log_det,
        })
    }

    /// From a lower factor; entries above the diagonal are ignored.
    pub fn from_cholesky(mean: DVector<T>, factor: DMatrix<T>) -> Result<Self> {
        check_len("factor rows", mean.len(), factor.nrows())?;
        check_len("factor columns", mean.len(), factor.ncols())?;
        let l = factor.lower_triangle();
        if l.diagonal().iter().any(|d| !(*d > T::zero()) || !d.finite()) {
            return Err(Error::Construction(
                "Cholesky factor needs a strictly positive diagonal".into(),
            ));
        }
        let log_det = chol_log_det(&l);
        Ok(Self {
            mean,
            cov: Covariance::Cholesky(l),
            log_det,
        })
    }

    pub fn diagonal(mean: DVector<T>, variances: DVector<T>) -> Result<Self> {
        check_len("variance vector", mean.len(), variances.len())?;
        if variances.iter().any(|v| !(*v > T::zero()) || !v.finite()) {
            return Err(Error::Construction("variances must be strictly positive".into()));
        }
        let log_det = variances.iter().fold(T::zero(), |acc, v| acc + v.ln());
        Ok(Self {
            mean,
            cov: Covariance::Diagonal(variances),
            log_det,
        })
    }

    /// `N(mean, σ² I)`.
    pub fn isotropic(mean: DVector<T>, sigma2: T) -> Result<Self> {
        let n = mean.len();
        Self::diagonal(mean, DVector::from_element(n, sigma2))
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(DVector::zeros(dim), T::one()).expect("unit variances are positive")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn representation(&self) -> &Covariance<T> {
        &self.cov
    }

    pub fn with_mean(mut self, mean: DVector<T>) -> Result<Self> {
        check_len("mean", self.dim(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    /// `log |Γ|`.
    pub fn log_det(&self) -> T {
        self.log_det
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.cov, Covariance::Diagonal(_))
    }

    pub fn covariance(&self) -> DMatrix<T> {
        match &self.cov {
            Covariance::Full { cov, .. } => cov.clone(),
            Covariance::Cholesky(l) => symmetrize(&(l * l.transpose())),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
        }
    }

    /// Marginal variances.
    pub fn variances(&self) -> DVector<T> {
        match &self.cov {
            Covariance::Full { cov, .. } => cov.diagonal(),
            Covariance::Cholesky(l) => {
                DVector::from_fn(l.nrows(), |i, _| l.row(i).norm_squared())
            }
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    /// Dense lower factor `L` with `Γ = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<T> {
        match &self.cov {
            Covariance::Full { chol, .. } => chol.clone(),
            Covariance::Cholesky(l) => l.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&v.map(|x| x.sqrt())),
        }
    }

    /// `L ε`.
    pub fn factor_mul(&self, eps: &DVector<T>) -> DVector<T> {
        match &self.cov {
            Covariance::Full { chol, .. } => chol * eps,
            Covariance::Cholesky(l) => l * eps,
            Covariance::Diagonal(v) => v.zip_map(eps, |a, e| a.sqrt() * e),
        }
    }

    /// `Γ⁻¹ x`.
    pub fn precision_mul(&self, x: &DVector<T>) -> DVector<T> {
        match &self.cov {
            Covariance::Full { chol, .. } => chol_solve(chol, x),
            Covariance::Cholesky(l) => chol_solve(l, x),
            Covariance::Diagonal(v) => x.component_div(v),
        }
    }

    /// Dense `Γ⁻¹`.
    pub fn precision(&self) -> DMatrix<T> {
        match &self.cov {
            Covariance::Full { chol, .. } => chol_inverse(chol),
            Covariance::Cholesky(l) => chol_inverse(l),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&v.map(|x| T::one() / x)),
        }
    }

    /// `xᵀ Γ⁻¹ x`.
    pub fn quad_form(&self, x: &DVector<T>) -> T {
        match &self.cov {
            Covariance::Diagonal(v) => x
                .iter()
                .zip(v.iter())
                .fold(T::zero(), |acc, (a, s)| acc + *a * *a / *s),
            Covariance::Full { chol, .. } | Covariance::Cholesky(chol) => chol
                .solve_lower_triangular(x)
                .expect("factor diagonal is positive")
                .norm_squared(),
        }
    }

    /// Converts to the full representation.
    pub fn to_full(&self) -> Result<Self> {
        match &self.cov {
            Covariance::Full { .. } => Ok(self.clone()),
            Covariance::Cholesky(l) => Ok(Self {
                mean: self.mean.clone(),
                cov: Covariance::Full {
                    cov: symmetrize(&(l * l.transpose())),
                    chol: l.clone(),
                },
                log_det: self.log_det,
            }),
            Covariance::Diagonal(_) => Self::full(self.mean.clone(), self.covariance()),
        }
    }

    /// `log N(x; μ, Γ)`.
    pub fn log_pdf(&self, x: &DVector<T>) -> Result<T> {
        check_len("evaluation point", self.dim(), x.len())?;
        Ok(self.log_pdf_unchecked(x))
    }

    pub(crate) fn log_pdf_unchecked(&self, x: &DVector<T>) -> T {
        let half = T::lit(0.5);
        let d = T::lit(self.dim() as f64);
        let r = x - &self.mean;
        -(half * d * T::two_pi().ln() + half * self.log_det + half * self.quad_form(&r))
    }

    /// `mean + L ε` for a supplied standard-normal vector.
    pub fn transform(&self, eps: &DVector<T>) -> DVector<T> {
        &self.mean + self.factor_mul(eps)
    }

    /// `count` draws, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> DMatrix<T> {
        let mut out = DMatrix::zeros(count, self.dim());
        for i in 0..count {
            let eps = standard_normal(rng, self.dim());
            out.row_mut(i).copy_from(&self.transform(&eps).transpose());
        }
        out
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        self.transform(&standard_normal(rng, self.dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    #[test]
    fn representations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cov = random_spd(&mut rng, 4);
        let mean = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
        let full = GaussianDensity::full(mean.clone(), cov.clone()).unwrap();
        let chol = GaussianDensity::from_cholesky(mean.clone(), full.factor()).unwrap();
        assert!((full.log_det() - chol.log_det()).abs() <= 1e-10 * full.log_det().abs());
        assert!((full.log_det() - cov.determinant().ln()).abs() < 1e-10);
        let x = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        assert!((full.log_pdf(&x).unwrap() - chol.log_pdf(&x).unwrap()).abs() < 1e-12);
        assert!((chol.covariance() - &cov).amax() < 1e-12);
        assert!((full.variances() - chol.variances()).amax() < 1e-12);
        let p = full.precision();
        assert!((&p * &cov - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn diagonal_to_full_keeps_log_det() {
        let g = GaussianDensity::<f64>::diagonal(
            DVector::zeros(3),
            DVector::from_vec(vec![0.5, 2.0, 7.0]),
        )
        .unwrap();
        let f = g.to_full().unwrap();
        assert!((g.log_det() - f.log_det()).abs() < 1e-12);
        assert!((g.log_det() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_densities_rejected() {
        assert!(GaussianDensity::<f64>::diagonal(DVector::zeros(2), DVector::from_vec(vec![1.0, 0.0])).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianDensity::full(DVector::zeros(2), bad).is_err());
        assert!(GaussianDensity::<f64>::full(DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn log_pdf_closed_forms() {
        let g = GaussianDensity::<f64>::standard(1);
        let v = g.log_pdf(&DVector::from_element(1, 0.0)).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let g4 = GaussianDensity::isotropic(DVector::zeros(1), 4.0).unwrap();
        let v = g4.log_pdf(&DVector::from_element(1, 2.0)).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 4f64.ln() - 0.5;
        assert!((v - expect).abs() < 1e-14);
        assert!(g4.log_pdf(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn zero_noise_draw_is_the_mean_and_seeding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GaussianDensity::full(DVector::from_vec(vec![1.0, 2.0]), random_spd(&mut rng, 2)).unwrap();
        assert_eq!(g.transform(&DVector::zeros(2)), *g.mean());
        let a = g.sample(&mut ChaCha8Rng::seed_from_u64(5), 10);
        let b = g.sample(&mut ChaCha8Rng::seed_from_u64(5), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_covariance_of_draws() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let g = GaussianDensity::full(DVector::from_vec(vec![0.5, -1.0]), cov.clone()).unwrap();
        let n = 100_000;
        let draws = g.sample(&mut ChaCha8Rng::seed_from_u64(7), n);
        let mean = draws.row_mean();
        let mut emp = DMatrix::zeros(2, 2);
        for r in draws.row_iter() {
            let c = (r - &mean).transpose();
            emp += &c * c.transpose();
        }
        emp /= (n - 1) as f64;
        assert!((emp - &cov).norm() / cov.norm() < 0.05);
    }

    proptest! {
        #[test]
        fn quadratic_form_is_positive_definite(seed in 0u64..500, scale in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GaussianDensity::full(DVector::zeros(3), random_spd(&mut rng, 3)).unwrap();
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)) * scale;
            prop_assert!(g.quad_form(&x) > 0.0);
            prop_assert_eq!(g.quad_form(&DVector::zeros(3)), 0.0);
        }
    }
}
