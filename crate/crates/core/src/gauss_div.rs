//! Closed-form and Monte-Carlo divergences between Gaussian densities, and
//! numerical checks of the skew Jensen-Shannon identity and upper bound.

use std::io::Write;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::gaussian::GaussianDensity;
use crate::linear_oracle::{closed_form_posterior, log_evidence, LinearGaussianProblem};
use crate::scalar::Real;

/// Minimum sample count accepted by the Monte-Carlo estimators.
pub const MIN_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate<T> {
    pub value: T,
    pub std_error: T,
    pub sample_count: usize,
}

impl<T: Real> DivergenceEstimate<T> {
    /// `|value| ≤ k · std_error`, with a rounding allowance for exact zeros.
    pub fn within(&self, k: f64) -> bool {
        self.value.abs() <= T::lit(k) * self.std_error + T::lit(1e-12)
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy)]
struct Moments<T> {
    n: usize,
    mean: T,
    m2: T,
}

impl<T: Real> Moments<T> {
    fn new() -> Self {
        Self {
            n: 0,
            mean: T::zero(),
            m2: T::zero(),
        }
    }

    fn push(&mut self, x: T) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / T::lit(self.n as f64);
        self.m2 += delta * (x - self.mean);
    }

    /// Variance of the sample mean.
    fn var_of_mean(&self) -> T {
        if self.n < 2 {
            return T::zero();
        }
        self.m2 / T::lit((self.n - 1) as f64) / T::lit(self.n as f64)
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} must lie in (0, 1)")));
    }
    Ok(())
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "{n} samples requested, at least {MIN_SAMPLES} required"
        )));
    }
    Ok(())
}

fn log_add_exp<T: Real>(a: T, b: T) -> T {
    let m = a.max(b);
    if !m.is_finite() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log((1-α) q + α p)` from the two log densities.
fn log_mixture<T: Real>(log_q: T, log_p: T, alpha: T) -> T {
    log_add_exp((T::one() - alpha).ln() + log_q, alpha.ln() + log_p)
}

pub fn log_pdf<T: Real>(g: &GaussianDensity<T>, x: &nalgebra::DVector<T>) -> Result<T> {
    g.log_pdf(x)
}

/// `KL(q ‖ p) = ½ [tr(Γp⁻¹ Γq) + ‖μp − μq‖²_{Γp⁻¹} − d + log(|Γp| / |Γq|)]`.
pub fn kl_gaussians<T: Real>(q: &GaussianDensity<T>, p: &GaussianDensity<T>) -> Result<T> {
    check_len("KL dimension", p.dim(), q.dim())?;
    let d = T::lit(q.dim() as f64);
    let trace = if p.is_diagonal() {
        q.variances()
            .iter()
            .zip(p.variances().iter())
            .fold(T::zero(), |acc, (a, b)| acc + *a / *b)
    } else {
        let lp = p.factor();
        let x = lp
            .solve_lower_triangular(&q.factor())
            .expect("factor diagonal is positive");
        x.norm_squared()
    };
    let maha = p.quad_form(&(p.mean() - q.mean()));
    let kl = (trace + maha - d + p.log_det() - q.log_det()) * T::lit(0.5);
    Ok(kl.max(T::zero()))
}

/// Monte-Carlo skew Jensen-Shannon divergence
/// `α KL(q ‖ m) + (1-α) KL(p ‖ m)` with `m = (1-α) q + α p`; each KL is
/// sampled from its own first argument.
pub fn jsd_alpha_mc<T: Real, R: Rng + ?Sized>(
    q: &GaussianDensity<T>,
    p: &GaussianDensity<T>,
    alpha: T,
    n: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate<T>> {
    check_alpha(alpha)?;
    check_samples(n)?;
    check_len("JSD dimension", q.dim(), p.dim())?;
    let mut from_q = Moments::new();
    let mut from_p = Moments::new();
    for _ in 0..n {
        let x = q.sample_one(rng);
        let (lq, lp) = (q.log_pdf_unchecked(&x), p.log_pdf_unchecked(&x));
        from_q.push(lq - log_mixture(lq, lp, alpha));
    }
    for _ in 0..n {
        let x = p.sample_one(rng);
        let (lq, lp) = (q.log_pdf_unchecked(&x), p.log_pdf_unchecked(&x));
        from_p.push(lp - log_mixture(lq, lp, alpha));
    }
    let beta = T::one() - alpha;
    let value = alpha * from_q.mean + beta * from_p.mean;
    let var = alpha * alpha * from_q.var_of_mean() + beta * beta * from_p.var_of_mean();
    Ok(DivergenceEstimate {
        value,
        std_error: var.sqrt(),
        sample_count: n,
    })
}

/// Estimates both sides of
/// `JS_α(q‖p) = −α E_q[log(p/q)] − α E_q[log(α + (1−α) q/p)] − (1−α) E_p[log(α + (1−α) q/p)]`
/// from independent draws and returns `|lhs − rhs|` with the combined
/// standard error.
pub fn jsd_identity_residual<T: Real, R: Rng + ?Sized>(
    q: &GaussianDensity<T>,
    p: &GaussianDensity<T>,
    alpha: T,
    n: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate<T>> {
    let lhs = jsd_alpha_mc(q, p, alpha, n, rng)?;
    let beta = T::one() - alpha;
    let log_ratio_mix = |lq: T, lp: T| log_add_exp(alpha.ln(), beta.ln() + lq - lp);
    let mut under_q = Moments::new();
    let mut under_p = Moments::new();
    for _ in 0..n {
        let x = q.sample_one(rng);
        let (lq, lp) = (q.log_pdf_unchecked(&x), p.log_pdf_unchecked(&x));
        under_q.push(-alpha * (lp - lq) - alpha * log_ratio_mix(lq, lp));
    }
    for _ in 0..n {
        let x = p.sample_one(rng);
        let (lq, lp) = (q.log_pdf_unchecked(&x), p.log_pdf_unchecked(&x));
        under_p.push(-beta * log_ratio_mix(lq, lp));
    }
    let rhs = under_q.mean + under_p.mean;
    let var = lhs.std_error * lhs.std_error + under_q.var_of_mean() + under_p.var_of_mean();
    Ok(DivergenceEstimate {
        value: (lhs.value - rhs).abs(),
        std_error: var.sqrt(),
        sample_count: n,
    })
}

/// Right side minus left side of the skew-JSD upper bound for a
/// linear-Gaussian instance where posterior, likelihood, prior and evidence
/// are all available in closed form. Should be non-negative.
pub fn evidence_bound_gap<T: Real, R: Rng + ?Sized>(
    problem: &LinearGaussianProblem<T>,
    q: &GaussianDensity<T>,
    alpha: T,
    n: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate<T>> {
    check_alpha(alpha)?;
    check_samples(n)?;
    let post = closed_form_posterior(problem)?;
    check_len("variational density", post.dim(), q.dim())?;
    let beta = T::one() - alpha;
    let w = beta / alpha;

    let lhs = jsd_alpha_mc(q, &post, alpha, n, rng)?;
    let lhs_value = lhs.value / alpha;
    let lhs_se = lhs.std_error / alpha;

    let mut log_lik = Moments::new();
    for _ in 0..n {
        let u = q.sample_one(rng);
        log_lik.push(problem.log_likelihood(&u));
    }
    let log_one_minus = beta.ln();
    let rhs = -kl_gaussians(q, &post)? + log_evidence(problem)?
        - log_one_minus
        - w * log_one_minus
        + w * kl_gaussians(&post, q)?
        - log_lik.mean
        + kl_gaussians(q, &problem.prior)?;
    let se = (lhs_se * lhs_se + log_lik.var_of_mean()).sqrt();
    Ok(DivergenceEstimate {
        value: rhs - lhs_value,
        std_error: se,
        sample_count: n,
    })
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationRow {
    pub check: String,
    pub value: f64,
    pub std_error: f64,
    pub pass: bool,
}

pub fn write_verification_csv<W: Write>(mut w: W, rows: &[VerificationRow]) -> Result<()> {
    writeln!(w, "check,value,std_error,pass")?;
    for r in rows {
        writeln!(w, "{},{:.16e},{:.16e},{}", r.check, r.value, r.std_error, r.pass)?;
    }
    Ok(())
}

/// Composite Simpson rule on `[a, b]` with `panels` (even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for i in 1..panels {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}
