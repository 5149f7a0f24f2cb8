//! Linear-Gaussian test bed: closed-form posteriors, the full-Cholesky
//! linear network parameterization, the expected training objective, and
//! recovery of the exact posterior by optimization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::encoder_net::AdamState;
use crate::error::{check_len, Error, Result};
use crate::gaussian::GaussianDensity;
use crate::linalg::{chol_inverse, chol_log_det, dense_cholesky, symmetrize};
use crate::scalar::{standard_normal, Real};

/// `y = A u + e` with Gaussian prior on `u` and Gaussian noise `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianProblem<T: Real> {
    pub a: DMatrix<T>,
    pub prior: GaussianDensity<T>,
    pub noise: GaussianDensity<T>,
    pub y: DVector<T>,
}

impl<T: Real> LinearGaussianProblem<T> {
    pub fn new(
        a: DMatrix<T>,
        prior: GaussianDensity<T>,
        noise: GaussianDensity<T>,
        y: DVector<T>,
    ) -> Result<Self> {
        check_len("prior dimension", a.ncols(), prior.dim())?;
        check_len("noise dimension", a.nrows(), noise.dim())?;
        check_len("observation", a.nrows(), y.len())?;
        Ok(Self { a, prior, noise, y })
    }

    /// Random instance: Gaussian `A`, full SPD prior, diagonal noise, and an
    /// observation generated from a prior draw.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, q: usize) -> Self {
        let a = DMatrix::from_fn(q, d, |_, _| T::lit(rng.random_range(-1.0..1.0)));
        let b = DMatrix::from_fn(d, d, |_, _| T::lit(rng.random_range(-0.6..0.6)));
        let cov = &b * b.transpose() + DMatrix::identity(d, d) * T::lit(0.5);
        let mean = DVector::from_fn(d, |_, _| T::lit(rng.random_range(-1.0..1.0)));
        let prior = GaussianDensity::full(mean, cov).expect("shifted Gram matrix is SPD");
        let var = DVector::from_fn(q, |_, _| T::lit(rng.random_range(0.05..0.5)));
        let nmean = DVector::from_fn(q, |_, _| T::lit(rng.random_range(-0.1..0.1)));
        let noise = GaussianDensity::diagonal(nmean, var).expect("positive variances");
        let u = prior.sample_one(rng);
        let y = &a * u + noise.sample_one(rng);
        Self { a, prior, noise, y }
    }

    pub fn param_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `log p(y | u)`.
    pub fn log_likelihood(&self, u: &DVector<T>) -> T {
        let r = &self.y - &self.a * u - self.noise.mean();
        let half = T::lit(0.5);
        -(half * T::lit(self.obs_dim() as f64) * T::two_pi().ln()
            + half * self.noise.log_det()
            + half * self.noise.quad_form(&r))
    }
}

/// `Γ = (Aᵀ Γ_E⁻¹ A + Γ_pr⁻¹)⁻¹`, `μ = Γ (Aᵀ Γ_E⁻¹ (y − μ_E) + Γ_pr⁻¹ μ_pr)`.
pub fn closed_form_posterior<T: Real>(p: &LinearGaussianProblem<T>) -> Result<GaussianDensity<T>> {
    let precision = posterior_precision(p);
    let l = dense_cholesky(&precision)
        .ok_or_else(|| Error::Construction("posterior precision not SPD".into()))?;
    let cov = chol_inverse(&l);
    let rhs = p.a.tr_mul(&p.noise.precision_mul(&(&p.y - p.noise.mean())))
        + p.prior.precision_mul(p.prior.mean());
    let mean = &cov * rhs;
    GaussianDensity::full(mean, cov)
}

/// `Aᵀ Γ_E⁻¹ A + Γ_pr⁻¹`.
pub fn posterior_precision<T: Real>(p: &LinearGaussianProblem<T>) -> DMatrix<T> {
    let data = p.a.transpose() * p.noise.precision() * &p.a;
    symmetrize(&(data + p.prior.precision()))
}

/// `log p(y)` with `y ~ N(A μ_pr + μ_E, A Γ_pr Aᵀ + Γ_E)`.
pub fn log_evidence<T: Real>(p: &LinearGaussianProblem<T>) -> Result<T> {
    let mean = &p.a * p.prior.mean() + p.noise.mean();
    let cov = &p.a * p.prior.covariance() * p.a.transpose() + p.noise.covariance();
    GaussianDensity::full(mean, cov)?.log_pdf(&p.y)
}

fn packed_len(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

/// Row-major position of strictly-lower entry `(i, j)`, `j < i`.
pub fn packed_index(i: usize, j: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

/// Affine maps from the observation to the posterior mean, the log of the
/// factor diagonal, and the packed strictly-lower factor entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNetworks<T: Real> {
    pub w_mu: DMatrix<T>,
    pub b_mu: DVector<T>,
    pub w_sigma: DMatrix<T>,
    pub b_sigma: DVector<T>,
    pub w_l: DMatrix<T>,
    pub b_l: DVector<T>,
}

impl<T: Real> LinearNetworks<T> {
    pub fn zeros(d: usize, q: usize) -> Self {
        let m = packed_len(d);
        Self {
            w_mu: DMatrix::zeros(d, q),
            b_mu: DVector::zeros(d),
            w_sigma: DMatrix::zeros(d, q),
            b_sigma: DVector::zeros(d),
            w_l: DMatrix::zeros(m, q),
            b_l: DVector::zeros(m),
        }
    }

    /// Networks with zero weights whose biases reproduce `target` exactly.
    pub fn from_density(target: &GaussianDensity<T>, q: usize) -> Self {
        let d = target.dim();
        let l = target.factor();
        let mut nets = Self::zeros(d, q);
        nets.b_mu = target.mean().clone();
        for i in 0..d {
            nets.b_sigma[i] = l[(i, i)].ln();
            for j in 0..i {
                nets.b_l[packed_index(i, j)] = l[(i, j)];
            }
        }
        nets
    }

    pub fn param_dim(&self) -> usize {
        self.b_mu.len()
    }

    pub fn mean(&self, y: &DVector<T>) -> DVector<T> {
        &self.w_mu * y + &self.b_mu
    }

    pub fn blocks(&self) -> Vec<&[T]> {
        vec![
            self.w_mu.as_slice(),
            self.b_mu.as_slice(),
            self.w_sigma.as_slice(),
            self.b_sigma.as_slice(),
            self.w_l.as_slice(),
            self.b_l.as_slice(),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_mu.as_mut_slice(),
            self.b_mu.as_mut_slice(),
            self.w_sigma.as_mut_slice(),
            self.b_sigma.as_mut_slice(),
            self.w_l.as_mut_slice(),
            self.b_l.as_mut_slice(),
        ]
    }

    pub fn norm(&self) -> T {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(T::zero(), |acc, x| acc + *x * *x)
            .sqrt()
    }
}

/// `Γ_post^{1/2} = L ⊙ 1_lower + diag(exp(W_σ y + b_σ))`.
pub fn build_cholesky_factor<T: Real>(nets: &LinearNetworks<T>, y: &DVector<T>) -> DMatrix<T> {
    let d = nets.param_dim();
    let log_diag = &nets.w_sigma * y + &nets.b_sigma;
    let packed = &nets.w_l * y + &nets.b_l;
    DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => log_diag[i].exp(),
        std::cmp::Ordering::Greater => packed[packed_index(i, j)],
        std::cmp::Ordering::Less => T::zero(),
    })
}

/// Quantities of a problem that the expected objective reuses.
#[derive(Debug, Clone)]
pub struct OracleCache<T: Real> {
    pub posterior: GaussianDensity<T>,
    true_cov: DMatrix<T>,
    noise_prec: DMatrix<T>,
    prior_prec: DMatrix<T>,
    data_hessian: DMatrix<T>,
}

impl<T: Real> OracleCache<T> {
    pub fn new(p: &LinearGaussianProblem<T>) -> Result<Self> {
        let posterior = closed_form_posterior(p)?;
        let noise_prec = p.noise.precision();
        let data_hessian = symmetrize(&(p.a.transpose() * &noise_prec * &p.a));
        Ok(Self {
            true_cov: posterior.covariance(),
            posterior,
            noise_prec,
            prior_prec: p.prior.precision(),
            data_hessian,
        })
    }
}

/// Per-block breakdown of the deterministic objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedLossTerms<T> {
    pub posterior_block: T,
    pub likelihood_block: T,
    pub prior_block: T,
    pub total: T,
}

fn alpha_weight<T: Real>(alpha: T) -> Result<T> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} must lie in (0, 1)")));
    }
    Ok((T::one() - alpha) / alpha)
}

fn trace_product<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.component_mul(&b.transpose()).sum()
}

/// The training objective with the expectation over the true posterior and
/// the reparameterized draw taken exactly, plus its gradient with respect to
/// all six parameter blocks.
pub fn expected_loss_and_grad<T: Real>(
    p: &LinearGaussianProblem<T>,
    cache: &OracleCache<T>,
    nets: &LinearNetworks<T>,
    alpha: T,
) -> Result<(ExpectedLossTerms<T>, LinearNetworks<T>)> {
    let w = alpha_weight(alpha)?;
    let d = p.param_dim();
    let two = T::lit(2.0);
    let mu = nets.mean(&p.y);
    let l = build_cholesky_factor(nets, &p.y);
    let s = &l * l.transpose();
    let s_inv = chol_inverse(&l);
    let log_det_s = chol_log_det(&l);

    let m = &mu - cache.posterior.mean();
    let s_inv_m = &s_inv * &m;
    let r = &p.y - &p.a * &mu - p.noise.mean();
    let noise_r = &cache.noise_prec * &r;
    let dp = &mu - p.prior.mean();
    let prior_dp = &cache.prior_prec * &dp;

    let posterior_block = log_det_s + trace_product(&s_inv, &cache.true_cov) + m.dot(&s_inv_m);
    let likelihood_block = trace_product(&cache.data_hessian, &s) + r.dot(&noise_r);
    let prior_block =
        trace_product(&cache.prior_prec, &s) + dp.dot(&prior_dp) + p.prior.log_det() - log_det_s;
    let total = w * posterior_block + likelihood_block + prior_block;

    // ∂/∂S then ∂/∂L = 2 G L for symmetric G
    let sgs = &s_inv * &cache.true_cov * &s_inv;
    let smms = &s_inv_m * s_inv_m.transpose();
    let g = (&s_inv - sgs - smms) * w + &cache.data_hessian + &cache.prior_prec - &s_inv;
    let g_l = (symmetrize(&g) * two) * &l;

    let g_mu = s_inv_m * (two * w) - p.a.tr_mul(&noise_r) * two + prior_dp * two;
    let g_sigma = DVector::from_fn(d, |i, _| g_l[(i, i)] * l[(i, i)]);
    let mut g_packed = DVector::zeros(packed_len(d));
    for i in 0..d {
        for j in 0..i {
            g_packed[packed_index(i, j)] = g_l[(i, j)];
        }
    }
    let yt = p.y.transpose();
    let grads = LinearNetworks {
        w_mu: &g_mu * &yt,
        b_mu: g_mu,
        w_sigma: &g_sigma * &yt,
        b_sigma: g_sigma,
        w_l: &g_packed * &yt,
        b_l: g_packed,
    };
    Ok((
        ExpectedLossTerms {
            posterior_block,
            likelihood_block,
            prior_block,
            total,
        },
        grads,
    ))
}

pub fn expected_loss<T: Real>(p: &LinearGaussianProblem<T>, nets: &LinearNetworks<T>, alpha: T) -> Result<T> {
    let cache = OracleCache::new(p)?;
    Ok(expected_loss_and_grad(p, &cache, nets, alpha)?.0.total)
}

/// One Monte-Carlo sample of the per-datum objective: `u` drawn from the true
/// posterior, one reparameterized draw from the network posterior.
pub fn sampled_loss<T: Real, R: Rng + ?Sized>(
    p: &LinearGaussianProblem<T>,
    cache: &OracleCache<T>,
    nets: &LinearNetworks<T>,
    alpha: T,
    rng: &mut R,
) -> Result<T> {
    let w = alpha_weight(alpha)?;
    let d = p.param_dim();
    let mu = nets.mean(&p.y);
    let l = build_cholesky_factor(nets, &p.y);
    let post = GaussianDensity::from_cholesky(mu.clone(), l)?;
    let u = cache.posterior.sample_one(rng);
    let draw = &mu + post.factor_mul(&standard_normal(rng, d));
    let r = &p.y - &p.a * draw - p.noise.mean();
    let posterior_term = post.log_det() + post.quad_form(&(&mu - u));
    let likelihood = p.noise.quad_form(&r);
    let s = post.covariance();
    let prior = trace_product(&cache.prior_prec, &s)
        + p.prior.quad_form(&(&mu - p.prior.mean()))
        + p.prior.log_det()
        - post.log_det();
    Ok(w * posterior_term + likelihood + prior)
}

/// Outcome of [`train_to_recover`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryReport<T> {
    pub mean_error: T,
    pub cov_error: T,
    pub steps: usize,
    pub final_loss: T,
}

pub fn recovery_errors<T: Real>(
    p: &LinearGaussianProblem<T>,
    cache: &OracleCache<T>,
    nets: &LinearNetworks<T>,
) -> (T, T) {
    let mu = nets.mean(&p.y);
    let l = build_cholesky_factor(nets, &p.y);
    let s = &l * l.transpose();
    let mt = cache.posterior.mean();
    let me = (&mu - mt).norm() / mt.norm().max(T::lit(f64::MIN_POSITIVE));
    let ce = (&s - &cache.true_cov).norm() / cache.true_cov.norm();
    (me, ce)
}

/// Number of consecutive strictly increasing loss values treated as divergence.
pub const DIVERGENCE_WINDOW: usize = 100;

/// Gradient norm below which recovery stops early.
pub const RECOVERY_GRAD_TOL: f64 = 1e-10;

/// Adam on the expected objective starting from `init` (zero networks when
/// `None`), with a cosine-decayed step size. Stops once the gradient norm
/// drops below [`RECOVERY_GRAD_TOL`]; `steps` in the report counts updates.
pub fn train_to_recover<T: Real>(
    p: &LinearGaussianProblem<T>,
    alpha: T,
    steps: usize,
    learning_rate: T,
    init: Option<LinearNetworks<T>>,
) -> Result<(LinearNetworks<T>, RecoveryReport<T>)> {
    let cache = OracleCache::new(p)?;
    let mut nets = init.unwrap_or_else(|| LinearNetworks::zeros(p.param_dim(), p.obs_dim()));
    let sizes: Vec<usize> = nets.blocks().iter().map(|b| b.len()).collect();
    let mut adam = AdamState::new(&sizes, learning_rate);
    let mut prev = None;
    let mut rising = 0usize;
    let mut last = T::zero();
    let mut taken = 0;
    for step in 0..steps {
        let (terms, grads) = expected_loss_and_grad(p, &cache, &nets, alpha)?;
        if !terms.total.finite() {
            return Err(Error::NonFinite(format!("expected loss at step {step}")));
        }
        if let Some(prev) = prev {
            let tol = T::lit(1e-12) * terms.total.abs().max(T::one());
            if terms.total > prev + tol {
                rising += 1;
                if rising >= DIVERGENCE_WINDOW {
                    return Err(Error::Divergence(format!(
                        "loss increased for {DIVERGENCE_WINDOW} consecutive steps (now {})",
                        terms.total
                    )));
                }
            } else {
                rising = 0;
            }
        }
        prev = Some(terms.total);
        last = terms.total;
        if grads.norm() < T::lit(RECOVERY_GRAD_TOL) {
            break;
        }
        let phase = T::pi() * T::lit(step as f64 / steps as f64);
        adam.learning_rate = learning_rate * T::lit(0.5) * (T::one() + phase.cos());
        adam.update(nets.blocks_mut(), grads.blocks());
        taken += 1;
    }
    let (mean_error, cov_error) = recovery_errors(p, &cache, &nets);
    Ok((
        nets,
        RecoveryReport {
            mean_error,
            cov_error,
            steps: taken,
            final_loss: last,
        },
    ))
}

/// Residuals of `vec(ABCD) = (DᵀCᵀ ⊗ A) vec(B)` and `vec(AB) = (I ⊗ A) vec(B)`.
pub fn vec_kron_identity_check<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    c: &DMatrix<T>,
    d: &DMatrix<T>,
) -> T {
    let vec = |m: &DMatrix<T>| DVector::from_column_slice(m.as_slice());
    let lhs1 = vec(&(a * b * c * d));
    let rhs1 = (d.transpose() * c.transpose()).kronecker(a) * vec(b);
    let lhs2 = vec(&(a * b));
    let rhs2 = DMatrix::<T>::identity(b.ncols(), b.ncols()).kronecker(a) * vec(b);
    (lhs1 - rhs1).amax().max((lhs2 - rhs2).amax())
}

/// One line of the linear recovery summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRow {
    pub seed: u64,
    pub mean_error: f64,
    pub cov_error: f64,
    pub steps: usize,
    pub pass: bool,
}

pub fn write_recovery_csv<W: std::io::Write>(mut w: W, rows: &[RecoveryRow]) -> Result<()> {
    writeln!(w, "seed,mean_error,cov_error,steps,pass")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{},{}",
            r.seed, r.mean_error, r.cov_error, r.steps, r.pass
        )?;
    }
    Ok(())
}
