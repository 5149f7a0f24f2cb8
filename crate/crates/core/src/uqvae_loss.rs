//! The three-term training objective with one reparameterized draw per
//! datum, for either the PDE forward map or a learned decoder.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::encoder_net::{EncoderParams, Mlp};
use crate::error::{check_len, Error, Result};
use crate::forward::ForwardMap;
use crate::gaussian::GaussianDensity;
use crate::scalar::{standard_normal, Real};

/// Conductivity floor applied to draws before they reach the PDE solver.
pub const CONDUCTIVITY_FLOOR: f64 = 1e-3;

/// Dense decoder from parameters to observations.
pub type DecoderParams<T> = Mlp<T>;

/// Forward model used in the likelihood term.
#[derive(Clone, Copy)]
pub enum PtoMode<'a, T: Real> {
    Modelled(&'a dyn ForwardMap<T>),
    Learned(&'a DecoderParams<T>),
}

impl<T: Real> PtoMode<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            PtoMode::Modelled(_) => "modelled",
            PtoMode::Learned(_) => "learned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub posterior_term: T,
    pub likelihood_term: T,
    pub prior_term: T,
    pub total: T,
    pub alpha: T,
}

/// `(1 − α) / α`, rejecting `α ∉ (0, 1)`.
pub fn posterior_weight<T: Real>(alpha: T) -> Result<T> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} must lie in (0, 1)")));
    }
    Ok((T::one() - alpha) / alpha)
}

pub fn reparam_draw<T: Real>(mu: &DVector<T>, log_sigma: &DVector<T>, eps: &DVector<T>) -> DVector<T> {
    DVector::from_fn(mu.len(), |i, _| mu[i] + log_sigma[i].exp() * eps[i])
}

/// Value and gradients with respect to `(μ, log σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad<T: Real> {
    pub value: T,
    pub d_mu: DVector<T>,
    pub d_log_sigma: DVector<T>,
}

/// `Σ 2 log σ_i + Σ ((μ_i − u_i) / σ_i)²`.
pub fn posterior_term<T: Real>(mu: &DVector<T>, log_sigma: &DVector<T>, u_true: &DVector<T>) -> TermGrad<T> {
    let two = T::lit(2.0);
    let d = mu.len();
    let mut value = T::zero();
    let mut d_mu = DVector::zeros(d);
    let mut d_ls = DVector::zeros(d);
    for i in 0..d {
        let inv_var = (-two * log_sigma[i]).exp();
        let diff = mu[i] - u_true[i];
        value += two * log_sigma[i] + diff * diff * inv_var;
        d_mu[i] = two * diff * inv_var;
        d_ls[i] = two - two * diff * diff * inv_var;
    }
    TermGrad {
        value,
        d_mu,
        d_log_sigma: d_ls,
    }
}

/// Value and gradient of a likelihood term with respect to the draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGrad<T: Real> {
    pub value: T,
    pub d_draw: DVector<T>,
    pub floor_events: usize,
}

/// `rᵀ Γ_E⁻¹ r` with `r = y − F(u) − μ_E`; entries of `u` below
/// [`CONDUCTIVITY_FLOOR`] are raised to it when the map needs positive input,
/// and receive no gradient.
pub fn likelihood_term_modelled<T: Real>(
    op: &dyn ForwardMap<T>,
    u_draw: &DVector<T>,
    y: &DVector<T>,
    noise: &GaussianDensity<T>,
) -> Result<LikelihoodGrad<T>> {
    check_len("draw", op.input_dim(), u_draw.len())?;
    check_len("observation", op.output_dim(), y.len())?;
    check_len("noise dimension", y.len(), noise.dim())?;
    let floor = T::lit(CONDUCTIVITY_FLOOR);
    let mut u = u_draw.clone();
    let mut floored = vec![false; u.len()];
    if op.requires_positive_input() {
        for (v, f) in u.iter_mut().zip(floored.iter_mut()) {
            if !(*v >= floor) {
                *v = floor;
                *f = true;
            }
        }
    }
    let residual = std::cell::RefCell::new(DVector::zeros(0));
    let weight = |fu: &DVector<T>| {
        let r = y - fu - noise.mean();
        let w = noise.precision_mul(&r) * T::lit(-2.0);
        *residual.borrow_mut() = r;
        w
    };
    let (_, mut grad) = op.apply_and_pullback(&u, &weight)?;
    let r = residual.into_inner();
    for (g, f) in grad.iter_mut().zip(&floored) {
        if *f {
            *g = T::zero();
        }
    }
    Ok(LikelihoodGrad {
        value: noise.quad_form(&r),
        d_draw: grad,
        floor_events: floored.iter().filter(|f| **f).count(),
    })
}

/// Learned-map likelihood for a single draw: value, gradient with respect to
/// the draw, and decoder gradients.
pub fn likelihood_term_learned<T: Real>(
    dec: &DecoderParams<T>,
    u_draw: &DVector<T>,
    y: &DVector<T>,
    noise: &GaussianDensity<T>,
) -> Result<(LikelihoodGrad<T>, DecoderParams<T>)> {
    let u = DMatrix::from_column_slice(u_draw.len(), 1, u_draw.as_slice());
    let ys = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let (values, d_draw, grads) = learned_batch(dec, &u, &ys, std::slice::from_ref(noise))?;
    Ok((
        LikelihoodGrad {
            value: values[0],
            d_draw: d_draw.column(0).into_owned(),
            floor_events: 0,
        },
        grads,
    ))
}

fn noise_for<T: Real>(noise: &[GaussianDensity<T>], i: usize) -> &GaussianDensity<T> {
    if noise.len() == 1 { &noise[0] } else { &noise[i] }
}

fn learned_batch<T: Real>(
    dec: &DecoderParams<T>,
    draws: &DMatrix<T>,
    ys: &DMatrix<T>,
    noise: &[GaussianDensity<T>],
) -> Result<(Vec<T>, DMatrix<T>, DecoderParams<T>)> {
    check_len("decoder output", ys.nrows(), dec.output_dim())?;
    let tape = dec.forward(draws)?;
    let b = draws.ncols();
    let mut values = Vec::with_capacity(b);
    let mut grad_out = DMatrix::zeros(ys.nrows(), b);
    for i in 0..b {
        let nz = noise_for(noise, i);
        check_len("noise dimension", ys.nrows(), nz.dim())?;
        let r = ys.column(i) - tape.output.column(i) - nz.mean();
        values.push(nz.quad_form(&r));
        grad_out.set_column(i, &(nz.precision_mul(&r) * T::lit(-2.0)));
    }
    let (grads, d_draw) = dec.backward(&tape, &grad_out)?;
    Ok((values, d_draw, grads))
}

/// Prior-term evaluator with the prior precision cached.
#[derive(Debug, Clone)]
pub struct PriorTerm<T: Real> {
    prior: GaussianDensity<T>,
    precision_diag: DVector<T>,
}

impl<T: Real> PriorTerm<T> {
    pub fn new(prior: GaussianDensity<T>) -> Self {
        let precision_diag = if prior.is_diagonal() {
            prior.variances().map(|v| T::one() / v)
        } else {
            prior.precision().diagonal()
        };
        Self { prior, precision_diag }
    }

    pub fn density(&self) -> &GaussianDensity<T> {
        &self.prior
    }

    /// `tr(Γ_pr⁻¹ Γ_post) + ‖μ − μ_pr‖²_{Γ_pr⁻¹} + log|Γ_pr| − log|Γ_post|`
    /// for `Γ_post = diag(σ²)`.
    pub fn eval(&self, mu: &DVector<T>, log_sigma: &DVector<T>) -> TermGrad<T> {
        let two = T::lit(2.0);
        let dp = mu - self.prior.mean();
        let pdp = self.prior.precision_mul(&dp);
        let mut value = dp.dot(&pdp) + self.prior.log_det();
        let mut d_ls = DVector::zeros(mu.len());
        for i in 0..mu.len() {
            let var = (two * log_sigma[i]).exp();
            value += self.precision_diag[i] * var - two * log_sigma[i];
            d_ls[i] = two * self.precision_diag[i] * var - two;
        }
        TermGrad {
            value,
            d_mu: pdp * two,
            d_log_sigma: d_ls,
        }
    }
}

pub fn prior_term<T: Real>(mu: &DVector<T>, log_sigma: &DVector<T>, prior: &GaussianDensity<T>) -> T {
    PriorTerm::new(prior.clone()).eval(mu, log_sigma).value
}

/// A batch of training pairs stored column-wise, with one noise density per
/// column or a single shared one.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a, T: Real> {
    pub u: &'a DMatrix<T>,
    pub y: &'a DMatrix<T>,
    pub noise: &'a [GaussianDensity<T>],
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Real> {
    pub breakdown: LossBreakdown<T>,
    pub encoder_grads: Mlp<T>,
    pub decoder_grads: Option<DecoderParams<T>>,
    pub floor_events: usize,
    pub clamp_events: usize,
}

/// Batch-averaged objective and gradients, drawing one standard-normal
/// vector per datum from `rng`.
pub fn total_loss_and_grads<T: Real, R: Rng + ?Sized>(
    batch: LossBatch<'_, T>,
    encoder: &EncoderParams<T>,
    mode: PtoMode<'_, T>,
    prior: &PriorTerm<T>,
    alpha: T,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let d = encoder.param_dim();
    let b = batch.u.ncols();
    let mut eps = DMatrix::zeros(d, b);
    for i in 0..b {
        eps.set_column(i, &standard_normal(rng, d));
    }
    total_loss_and_grads_with_eps(batch, encoder, mode, prior, alpha, &eps)
}

/// As [`total_loss_and_grads`] with the draws supplied column-wise.
pub fn total_loss_and_grads_with_eps<T: Real>(
    batch: LossBatch<'_, T>,
    encoder: &EncoderParams<T>,
    mode: PtoMode<'_, T>,
    prior: &PriorTerm<T>,
    alpha: T,
    eps: &DMatrix<T>,
) -> Result<LossOutput<T>> {
    let w = posterior_weight(alpha)?;
    let d = encoder.param_dim();
    let b = batch.u.ncols();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_len("parameter rows", d, batch.u.nrows())?;
    check_len("observation columns", b, batch.y.ncols())?;
    check_len("draw columns", b, eps.ncols())?;
    if batch.noise.len() != 1 && batch.noise.len() != b {
        return Err(Error::DimensionMismatch {
            what: "noise densities",
            expected: b,
            got: batch.noise.len(),
        });
    }
    let enc = encoder.encode_batch(batch.y)?;
    let mut draws = DMatrix::zeros(d, b);
    for i in 0..b {
        let u = reparam_draw(
            &enc.mu.column(i).into_owned(),
            &enc.log_sigma.column(i).into_owned(),
            &eps.column(i).into_owned(),
        );
        draws.set_column(i, &u);
    }

    let (lik, decoder_grads): (Vec<LikelihoodGrad<T>>, _) = match mode {
        PtoMode::Modelled(op) => {
            let per: Vec<Result<LikelihoodGrad<T>>> = (0..b)
                .into_par_iter()
                .map(|i| {
                    likelihood_term_modelled(
                        op,
                        &draws.column(i).into_owned(),
                        &batch.y.column(i).into_owned(),
                        noise_for(batch.noise, i),
                    )
                })
                .collect();
            (per.into_iter().collect::<Result<_>>()?, None)
        }
        PtoMode::Learned(dec) => {
            let (values, d_draw, grads) = learned_batch(dec, &draws, batch.y, batch.noise)?;
            let lik = values
                .into_iter()
                .enumerate()
                .map(|(i, value)| LikelihoodGrad {
                    value,
                    d_draw: d_draw.column(i).into_owned(),
                    floor_events: 0,
                })
                .collect();
            (lik, Some(grads))
        }
    };

    let scale = T::one() / T::lit(b as f64);
    let mut grad_mu = DMatrix::zeros(d, b);
    let mut grad_ls = DMatrix::zeros(d, b);
    let (mut post_sum, mut lik_sum, mut prior_sum) = (T::zero(), T::zero(), T::zero());
    let mut floor_events = 0;
    for i in 0..b {
        let mu = enc.mu.column(i).into_owned();
        let ls = enc.log_sigma.column(i).into_owned();
        let post = posterior_term(&mu, &ls, &batch.u.column(i).into_owned());
        let pr = prior.eval(&mu, &ls);
        let lk = &lik[i];
        for (name, v) in [("posterior", post.value), ("likelihood", lk.value), ("prior", pr.value)] {
            if !v.finite() {
                return Err(Error::NonFinite(format!("{name} term of batch element {i} is {v}")));
            }
        }
        post_sum += post.value;
        lik_sum += lk.value;
        prior_sum += pr.value;
        floor_events += lk.floor_events;
        let sigma_eps = DVector::from_fn(d, |k, _| ls[k].exp() * eps[(k, i)]);
        let gm = (post.d_mu * w + &lk.d_draw + pr.d_mu) * scale;
        let gs = (post.d_log_sigma * w + lk.d_draw.component_mul(&sigma_eps) + pr.d_log_sigma) * scale;
        grad_mu.set_column(i, &gm);
        grad_ls.set_column(i, &gs);
    }
    let encoder_grads = encoder.backward_batch(&enc, &grad_mu, &grad_ls)?;
    let decoder_grads = decoder_grads.map(|mut g: Mlp<T>| {
        g.scale(scale);
        g
    });
    let breakdown = LossBreakdown {
        posterior_term: post_sum * scale,
        likelihood_term: lik_sum * scale,
        prior_term: prior_sum * scale,
        total: (w * post_sum + lik_sum + prior_sum) * scale,
        alpha,
    };
    Ok(LossOutput {
        breakdown,
        encoder_grads,
        decoder_grads,
        floor_events,
        clamp_events: enc.clamp_events(),
    })
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub posterior_term: f64,
    pub likelihood_term: f64,
    pub prior_term: f64,
    pub floor_events: usize,
    pub clamp_events: usize,
    pub wall_seconds: f64,
}

pub const TRAINING_LOG_HEADER: &str =
    "epoch,total,posterior_term,likelihood_term,prior_term,floor_events,clamp_events,wall_seconds";

pub fn write_training_log<W: std::io::Write>(mut w: W, rows: &[EpochLog]) -> Result<()> {
    writeln!(w, "{TRAINING_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{},{},{:.3}",
            r.epoch,
            r.total,
            r.posterior_term,
            r.likelihood_term,
            r.prior_term,
            r.floor_events,
            r.clamp_events,
            r.wall_seconds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_net::{init_encoder, HeadInit};
    use crate::forward::LinearMap;
    use crate::gauss_div::kl_gaussians;
    use crate::mesh_fem::{build_unit_square_mesh, PtoOperator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
    }

    fn rmat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn draw_cases() {
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(reparam_draw(&mu, &DVector::zeros(2), &DVector::zeros(2)), mu);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(reparam_draw(&mu, &DVector::zeros(2), &e1), DVector::from_vec(vec![2.0, 2.0]));
    }

    #[test]
    fn draw_statistics() {
        let mu = DVector::from_vec(vec![0.7, -1.2]);
        let ls = DVector::from_vec(vec![0.3, -0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut s1 = DVector::zeros(2);
        let mut s2 = DVector::zeros(2);
        for _ in 0..n {
            let u = reparam_draw(&mu, &ls, &standard_normal(&mut rng, 2));
            s1 += &u;
            s2 += u.component_mul(&u);
        }
        let m = s1 / n as f64;
        for i in 0..2 {
            let sd = (s2[i] / n as f64 - m[i] * m[i]).sqrt();
            assert!((m[i] - mu[i]).abs() < 0.02 * mu[i].abs());
            assert!((sd / ls[i].exp() - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn posterior_term_cases() {
        let z = DVector::<f64>::zeros(3);
        assert_eq!(posterior_term(&z, &z, &z).value, 0.0);
        let r = posterior_term(&DVector::from_element(1, 2.0), &DVector::zeros(1), &DVector::zeros(1));
        assert_eq!(r.value, 4.0);
    }

    #[test]
    fn posterior_term_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = rvec(&mut rng, 4, -1.0, 1.0);
        let ls = rvec(&mut rng, 4, -0.5, 0.5);
        let u = rvec(&mut rng, 4, -1.0, 1.0);
        let g = posterior_term(&mu, &ls, &u);
        let h = 1e-6;
        for i in 0..4 {
            let mut a = mu.clone();
            a[i] += h;
            let mut b = mu.clone();
            b[i] -= h;
            let fd = (posterior_term(&a, &ls, &u).value - posterior_term(&b, &ls, &u).value) / (2.0 * h);
            assert!((fd - g.d_mu[i]).abs() <= 1e-6 * g.d_mu[i].abs().max(1.0));
            let mut a = ls.clone();
            a[i] += h;
            let mut b = ls.clone();
            b[i] -= h;
            let fd = (posterior_term(&mu, &a, &u).value - posterior_term(&mu, &b, &u).value) / (2.0 * h);
            assert!((fd - g.d_log_sigma[i]).abs() <= 1e-6 * g.d_log_sigma[i].abs().max(1.0));
        }
    }

    fn pto(n: usize) -> PtoOperator<f64> {
        PtoOperator::with_random_sensors(build_unit_square_mesh(n).unwrap(), 0.5, 10, 3).unwrap()
    }

    #[test]
    fn modelled_likelihood_zero_at_match() {
        let op = pto(6);
        let u = DVector::from_element(op.input_dim(), 1.5);
        let noise = GaussianDensity::isotropic(DVector::from_element(10, 0.1), 0.01).unwrap();
        let y = op.apply(&u).unwrap() + noise.mean();
        let r = likelihood_term_modelled(&op, &u, &y, &noise).unwrap();
        assert!(r.value.abs() < 1e-20);
        assert!(r.d_draw.amax() < 1e-12);
    }

    #[test]
    fn modelled_likelihood_noise_scaling() {
        let op = pto(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = rvec(&mut rng, op.input_dim(), 1.0, 3.0);
        let y = rvec(&mut rng, 10, 0.0, 1.0);
        let n1 = GaussianDensity::isotropic(DVector::zeros(10), 0.02).unwrap();
        let n2 = GaussianDensity::isotropic(DVector::zeros(10), 0.04).unwrap();
        let a = likelihood_term_modelled(&op, &u, &y, &n1).unwrap().value;
        let b = likelihood_term_modelled(&op, &u, &y, &n2).unwrap().value;
        assert!((a - 2.0 * b).abs() < 1e-12 * a);
    }

    #[test]
    fn modelled_likelihood_gradient_through_fem() {
        let op = pto(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = op.input_dim();
        let u = rvec(&mut rng, d, 1.0, 3.0);
        let y = op.apply(&rvec(&mut rng, d, 1.0, 3.0)).unwrap();
        let noise = GaussianDensity::isotropic(DVector::zeros(10), 1e-4).unwrap();
        let g = likelihood_term_modelled(&op, &u, &y, &noise).unwrap().d_draw;
        let dir = rvec(&mut rng, d, -1.0, 1.0);
        let h = 1e-6;
        let fp = likelihood_term_modelled(&op, &(&u + &dir * h), &y, &noise).unwrap().value;
        let fm = likelihood_term_modelled(&op, &(&u - &dir * h), &y, &noise).unwrap().value;
        let fd = (fp - fm) / (2.0 * h);
        let an = g.dot(&dir);
        assert!((fd - an).abs() <= 1e-5 * an.abs(), "{fd} vs {an}");
    }

    #[test]
    fn floor_counts_and_masks() {
        let op = pto(4);
        let mut u = DVector::from_element(op.input_dim(), 1.0);
        u[0] = -0.5;
        u[3] = 0.0;
        let y = DVector::zeros(10);
        let noise = GaussianDensity::isotropic(DVector::zeros(10), 1.0).unwrap();
        let r = likelihood_term_modelled(&op, &u, &y, &noise).unwrap();
        assert_eq!(r.floor_events, 2);
        assert_eq!(r.d_draw[0], 0.0);
        assert_eq!(r.d_draw[3], 0.0);
        assert!(r.value.is_finite());
    }

    #[test]
    fn learned_zero_decoder_matches_bias() {
        let mut dec = Mlp::<f64>::zeros(&[3, 4, 2]).unwrap();
        let y = DVector::from_vec(vec![0.4, -0.3]);
        let noise = GaussianDensity::isotropic(DVector::from_vec(vec![0.1, 0.1]), 0.5).unwrap();
        dec.layers[1].bias = &y - noise.mean();
        let (r, _) = likelihood_term_learned(&dec, &DVector::from_element(3, 0.7), &y, &noise).unwrap();
        assert!(r.value.abs() < 1e-30);
    }

    fn linear_decoder(a: &DMatrix<f64>) -> Mlp<f64> {
        let mut dec = Mlp::<f64>::zeros(&[a.ncols(), a.nrows()]).unwrap();
        dec.layers[0].weight = a.clone();
        dec
    }

    #[test]
    fn learned_equals_modelled_for_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rmat(&mut rng, 3, 5, -1.0, 1.0);
        let dec = linear_decoder(&a);
        let lin = LinearMap::new(a);
        let noise = GaussianDensity::diagonal(rvec(&mut rng, 3, -0.1, 0.1), rvec(&mut rng, 3, 0.1, 1.0)).unwrap();
        for _ in 0..10 {
            let u = rvec(&mut rng, 5, -2.0, 2.0);
            let y = rvec(&mut rng, 3, -1.0, 1.0);
            let m = likelihood_term_modelled(&lin, &u, &y, &noise).unwrap();
            let (l, _) = likelihood_term_learned(&dec, &u, &y, &noise).unwrap();
            assert!((m.value - l.value).abs() <= 1e-12 * m.value.max(1.0));
            assert!((m.d_draw - l.d_draw).amax() < 1e-12);
        }
    }

    #[test]
    fn learned_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = Mlp::<f64>::init(&[3, 6, 2], &mut rng).unwrap();
        let u = rvec(&mut rng, 3, -1.0, 1.0);
        let y = rvec(&mut rng, 2, -1.0, 1.0);
        let noise = GaussianDensity::isotropic(DVector::zeros(2), 0.3).unwrap();
        let (r, g) = likelihood_term_learned(&dec, &u, &y, &noise).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut a = u.clone();
            a[i] += h;
            let mut b = u.clone();
            b[i] -= h;
            let fd = (likelihood_term_learned(&dec, &a, &y, &noise).unwrap().0.value
                - likelihood_term_learned(&dec, &b, &y, &noise).unwrap().0.value)
                / (2.0 * h);
            assert!((fd - r.d_draw[i]).abs() <= 1e-5 * r.d_draw[i].abs().max(1.0));
        }
        let dir = {
            let mut m = dec.zeros_like();
            for b in m.blocks_mut() {
                b.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            }
            m
        };
        let mut p = dec.clone();
        p.axpy(h, &dir);
        let mut m = dec.clone();
        m.axpy(-h, &dir);
        let fd = (likelihood_term_learned(&p, &u, &y, &noise).unwrap().0.value
            - likelihood_term_learned(&m, &u, &y, &noise).unwrap().0.value)
            / (2.0 * h);
        let an = g.dot(&dir);
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
    }

    #[test]
    fn prior_term_cases() {
        let prior = GaussianDensity::diagonal(DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.5, 3.0])).unwrap();
        let ls = prior.variances().map(|v: f64| 0.5 * v.ln());
        let v = prior_term(prior.mean(), &ls, &prior);
        assert!((v - 2.0).abs() < 1e-14);
        let v = prior_term(&DVector::<f64>::zeros(1), &DVector::zeros(1), &GaussianDensity::standard(1));
        assert_eq!(v, 1.0);
    }

    #[test]
    fn prior_term_is_twice_kl_plus_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for full in [false, true] {
            let var = rvec(&mut rng, 4, 0.2, 2.0);
            let mut prior = GaussianDensity::diagonal(rvec(&mut rng, 4, -1.0, 1.0), var).unwrap();
            if full {
                let b = rmat(&mut rng, 4, 4, -0.5, 0.5);
                prior = GaussianDensity::full(prior.mean().clone(), &b * b.transpose() + DMatrix::identity(4, 4)).unwrap();
            }
            let mu = rvec(&mut rng, 4, -1.0, 1.0);
            let ls = rvec(&mut rng, 4, -0.7, 0.7);
            let q = GaussianDensity::diagonal(mu.clone(), ls.map(|s| (2.0 * s).exp())).unwrap();
            let v = prior_term(&mu, &ls, &prior);
            let kl = kl_gaussians(&q, &prior).unwrap();
            assert!((v - (2.0 * kl + 4.0)).abs() < 1e-12 * v.abs().max(1.0));
            let t = PriorTerm::new(prior.clone()).eval(&mu, &ls);
            let h = 1e-6;
            for i in 0..4 {
                let mut a = mu.clone();
                a[i] += h;
                let mut b = mu.clone();
                b[i] -= h;
                let fd = (prior_term(&a, &ls, &prior) - prior_term(&b, &ls, &prior)) / (2.0 * h);
                assert!((fd - t.d_mu[i]).abs() <= 1e-6 * t.d_mu[i].abs().max(1.0));
                let mut a = ls.clone();
                a[i] += h;
                let mut b = ls.clone();
                b[i] -= h;
                let fd = (prior_term(&mu, &a, &prior) - prior_term(&mu, &b, &prior)) / (2.0 * h);
                assert!((fd - t.d_log_sigma[i]).abs() <= 1e-6 * t.d_log_sigma[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn weights() {
        assert_eq!(posterior_weight(0.5f64).unwrap(), 1.0);
        assert!((posterior_weight(0.001f64).unwrap() - 999.0).abs() < 1e-9);
        assert!(posterior_weight(0.0).is_err());
        assert!(posterior_weight(1.0).is_err());
        assert!(posterior_weight(f64::NAN).is_err());
    }

    struct Toy {
        enc: EncoderParams<f64>,
        a: DMatrix<f64>,
        prior: PriorTerm<f64>,
        u: DMatrix<f64>,
        y: DMatrix<f64>,
        noise: Vec<GaussianDensity<f64>>,
        eps: DMatrix<f64>,
    }

    fn toy(seed: u64, d: usize, q: usize, b: usize) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = init_encoder(q, d, &[5], HeadInit { mean: 0.1, log_std: -0.2 }, seed).unwrap();
        let a = rmat(&mut rng, q, d, -1.0, 1.0);
        let prior = PriorTerm::new(GaussianDensity::diagonal(rvec(&mut rng, d, -0.5, 0.5), rvec(&mut rng, d, 0.5, 2.0)).unwrap());
        let u = rmat(&mut rng, d, b, -1.0, 1.0);
        let y = &a * &u + rmat(&mut rng, q, b, -0.1, 0.1);
        let noise = (0..b)
            .map(|_| GaussianDensity::isotropic(DVector::zeros(q), rng.random_range(0.05..0.5)).unwrap())
            .collect();
        let eps = rmat(&mut rng, d, b, -1.5, 1.5);
        Toy { enc, a, prior, u, y, noise, eps }
    }

    fn eval(t: &Toy, enc: &EncoderParams<f64>, dec: Option<&Mlp<f64>>, alpha: f64) -> LossOutput<f64> {
        let lin = LinearMap::new(t.a.clone());
        let mode = match dec {
            Some(d) => PtoMode::Learned(d),
            None => PtoMode::Modelled(&lin),
        };
        let batch = LossBatch { u: &t.u, y: &t.y, noise: &t.noise };
        total_loss_and_grads_with_eps(batch, enc, mode, &t.prior, alpha, &t.eps).unwrap()
    }

    #[test]
    fn full_gradient_matches_fd() {
        let t = toy(9, 2, 2, 3);
        for alpha in [0.5, 0.1] {
            let out = eval(&t, &t.enc, None, alpha);
            let h = 1e-6;
            for (bi, blk) in t.enc.net.blocks().iter().enumerate() {
                for k in 0..blk.len() {
                    let mut p = t.enc.clone();
                    p.net.blocks_mut()[bi][k] += h;
                    let mut m = t.enc.clone();
                    m.net.blocks_mut()[bi][k] -= h;
                    let fd = (eval(&t, &p, None, alpha).breakdown.total - eval(&t, &m, None, alpha).breakdown.total) / (2.0 * h);
                    let an = out.encoder_grads.blocks()[bi][k];
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "block {bi}[{k}]: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn decoder_gradient_matches_fd() {
        let t = toy(10, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dec = Mlp::init(&[2, 4, 3], &mut rng).unwrap();
        let out = eval(&t, &t.enc, Some(&dec), 0.3);
        let g = out.decoder_grads.unwrap();
        let h = 1e-6;
        for (bi, blk) in dec.blocks().iter().enumerate() {
            for k in 0..blk.len() {
                let mut p = dec.clone();
                p.blocks_mut()[bi][k] += h;
                let mut m = dec.clone();
                m.blocks_mut()[bi][k] -= h;
                let fd = (eval(&t, &t.enc, Some(&p), 0.3).breakdown.total - eval(&t, &t.enc, Some(&m), 0.3).breakdown.total) / (2.0 * h);
                let an = g.blocks()[bi][k];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0));
            }
        }
    }

    #[test]
    fn separability() {
        let t = toy(11, 3, 2, 4);
        let alpha = 0.2;
        let out = eval(&t, &t.enc, None, alpha);
        let lin = LinearMap::new(t.a.clone());
        let mut total = 0.0;
        for i in 0..4 {
            let (mu, ls) = t.enc.encode(&t.y.column(i).into_owned()).unwrap();
            let draw = reparam_draw(&mu, &ls, &t.eps.column(i).into_owned());
            total += 4.0 * posterior_term(&mu, &ls, &t.u.column(i).into_owned()).value
                + likelihood_term_modelled(&lin, &draw, &t.y.column(i).into_owned(), &t.noise[i]).unwrap().value
                + prior_term(&mu, &ls, t.prior.density());
        }
        assert!((out.breakdown.total - total / 4.0).abs() < 1e-12 * total.abs().max(1.0));
        let bd = out.breakdown;
        let recomposed = 4.0 * bd.posterior_term + bd.likelihood_term + bd.prior_term;
        assert!((bd.total - recomposed).abs() < 1e-12 * bd.total.abs().max(1.0));
    }

    #[test]
    fn modelled_and_learned_totals_agree() {
        let t = toy(12, 3, 2, 5);
        let dec = linear_decoder(&t.a);
        let a = eval(&t, &t.enc, None, 0.4).breakdown.total;
        let b = eval(&t, &t.enc, Some(&dec), 0.4).breakdown.total;
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn total_decreases_in_alpha() {
        let mut t = toy(13, 3, 2, 3);
        let d = 3;
        let bias = &mut t.enc.net.layers.last_mut().unwrap().bias;
        for i in 0..d {
            bias[d + i] = 0.5;
        }
        let mut last = f64::INFINITY;
        for alpha in [0.00001, 0.001, 0.1, 0.5, 0.9] {
            let out = eval(&t, &t.enc, None, alpha);
            assert!(out.breakdown.posterior_term > 0.0);
            assert!(out.breakdown.total < last);
            last = out.breakdown.total;
        }
    }

    #[test]
    fn duplicated_batch_same_average() {
        let t = toy(14, 2, 3, 3);
        let a = eval(&t, &t.enc, None, 0.3);
        let dup = |m: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(m.nrows(), 2 * m.ncols());
            out.columns_mut(0, m.ncols()).copy_from(m);
            out.columns_mut(m.ncols(), m.ncols()).copy_from(m);
            out
        };
        let mut noise = t.noise.clone();
        noise.extend(t.noise.iter().cloned());
        let t2 = Toy {
            enc: t.enc.clone(),
            a: t.a.clone(),
            prior: t.prior.clone(),
            u: dup(&t.u),
            y: dup(&t.y),
            noise,
            eps: dup(&t.eps),
        };
        let b = eval(&t2, &t.enc, None, 0.3);
        assert!((a.breakdown.total - b.breakdown.total).abs() < 1e-12 * a.breakdown.total.abs());
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = toy(15, 2, 2, 2);
        let lin = LinearMap::new(t.a.clone());
        let batch = LossBatch { u: &t.u, y: &t.y, noise: &t.noise };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(total_loss_and_grads(batch, &t.enc, PtoMode::Modelled(&lin), &t.prior, 1.5, &mut rng).is_err());
        let empty = DMatrix::<f64>::zeros(2, 0);
        let batch = LossBatch { u: &empty, y: &empty, noise: &t.noise[..1] };
        assert!(total_loss_and_grads(batch, &t.enc, PtoMode::Modelled(&lin), &t.prior, 0.5, &mut rng).is_err());
    }

    #[test]
    fn modelled_fem_batch_is_deterministic() {
        let op = pto(5);
        let d = op.input_dim();
        let enc = init_encoder(10, d, &[8], HeadInit { mean: 2.0, log_std: -1.0 }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let u = rmat(&mut rng, d, 6, 1.0, 3.0);
        let mut y = DMatrix::zeros(10, 6);
        for i in 0..6 {
            y.set_column(i, &op.apply(&u.column(i).into_owned()).unwrap());
        }
        let noise = vec![GaussianDensity::isotropic(DVector::zeros(10), 1e-4).unwrap()];
        let prior = PriorTerm::new(GaussianDensity::isotropic(DVector::from_element(d, 2.0), 1.0).unwrap());
        let run = || {
            let batch = LossBatch { u: &u, y: &y, noise: &noise };
            total_loss_and_grads(batch, &enc, PtoMode::Modelled(&op), &prior, 0.001, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.breakdown, b.breakdown);
        assert_eq!(a.encoder_grads, b.encoder_grads);
    }
}
