//! MAP estimation by Gauss-Newton with Armijo backtracking, and the Laplace
//! posterior covariance built from the Gauss-Newton Hessian.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::forward::ForwardMap;
use crate::gaussian::GaussianDensity;
use crate::linalg::{chol_inverse, chol_solve, dense_cholesky, symmetrize};
use crate::scalar::Real;

pub const ARMIJO_C: f64 = 1e-4;
pub const BACKTRACK: f64 = 0.5;
pub const MAX_HALVINGS: usize = 30;
pub const DEFAULT_MAX_ITER: usize = 25;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Largest fraction of the distance to `u = 0` a trial step may cover.
pub const FRACTION_TO_BOUNDARY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult<T: Real> {
    pub u_map: DVector<T>,
    pub objective: T,
    pub grad_norm: T,
    pub initial_grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start point and after each accepted step.
    pub history: Vec<T>,
}

struct Problem<'a, T: Real> {
    op: &'a dyn ForwardMap<T>,
    y: &'a DVector<T>,
    prior: &'a GaussianDensity<T>,
    noise: &'a GaussianDensity<T>,
    noise_prec: DMatrix<T>,
    prior_prec: DMatrix<T>,
}

impl<T: Real> Problem<'_, T> {
    fn residual(&self, fu: &DVector<T>) -> DVector<T> {
        self.y - fu - self.noise.mean()
    }

    /// `None` when the map rejects `u`.
    fn objective(&self, u: &DVector<T>) -> Result<Option<T>> {
        let fu = match self.op.apply(u) {
            Ok(v) => v,
            Err(Error::NonEllipticCoefficient { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let r = self.residual(&fu);
        let dp = u - self.prior.mean();
        let half = T::lit(0.5);
        Ok(Some(half * self.noise.quad_form(&r) + half * self.prior.quad_form(&dp)))
    }

    /// Objective, gradient and Gauss-Newton Hessian at `u`.
    fn linearize(&self, u: &DVector<T>) -> Result<(T, DVector<T>, DMatrix<T>)> {
        let fu = self.op.apply(u)?;
        let jac = self.op.jacobian(u)?;
        let r = self.residual(&fu);
        let dp = u - self.prior.mean();
        let pdp = &self.prior_prec * &dp;
        let nr = &self.noise_prec * &r;
        let half = T::lit(0.5);
        let value = half * r.dot(&nr) + half * dp.dot(&pdp);
        let grad = pdp - jac.tr_mul(&nr);
        let hess = symmetrize(&(jac.transpose() * &self.noise_prec * &jac + &self.prior_prec));
        Ok((value, grad, hess))
    }
}

/// Minimizes `½‖y − F(u) − μ_E‖²_{Γ_E⁻¹} + ½‖u − μ_pr‖²_{Γ_pr⁻¹}` from
/// `u = μ_pr`, stopping when the gradient norm falls to `tol` times its
/// initial value.
pub fn map_estimate<T: Real>(
    op: &dyn ForwardMap<T>,
    y: &DVector<T>,
    prior: &GaussianDensity<T>,
    noise: &GaussianDensity<T>,
    tol: T,
    max_iter: usize,
) -> Result<MapResult<T>> {
    check_len("prior dimension", op.input_dim(), prior.dim())?;
    check_len("observation", op.output_dim(), y.len())?;
    check_len("noise dimension", op.output_dim(), noise.dim())?;
    let pb = Problem {
        op,
        y,
        prior,
        noise,
        noise_prec: noise.precision(),
        prior_prec: prior.precision(),
    };
    let mut u = prior.mean().clone();
    let (mut value, mut grad, mut hess) = pb.linearize(&u)?;
    let g0 = grad.norm();
    let mut history = vec![value];
    let mut iterations = 0;
    let done = |g: &DVector<T>| g.norm() <= tol * g0;
    while !done(&grad) && iterations < max_iter {
        let l = dense_cholesky(&hess)
            .ok_or_else(|| Error::SingularSystem("Gauss-Newton Hessian not positive definite".into()))?;
        let step = -chol_solve(&l, &grad);
        let slope = grad.dot(&step);
        let mut t = if op.requires_positive_input() { boundary_step(&u, &step) } else { T::one() };
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &u + &step * t;
            if let Some(v) = pb.objective(&trial)? {
                if v <= value + T::lit(ARMIJO_C) * t * slope {
                    accepted = Some((trial, v));
                    break;
                }
            }
            t *= T::lit(BACKTRACK);
        }
        let Some((next, _)) = accepted else {
            return Err(Error::Stagnation {
                iteration: iterations,
                halvings: MAX_HALVINGS,
                objective: value.to_f64_lossy(),
                grad_norm: grad.norm().to_f64_lossy(),
            });
        };
        u = next;
        (value, grad, hess) = pb.linearize(&u)?;
        history.push(value);
        iterations += 1;
    }
    Ok(MapResult {
        converged: done(&grad),
        grad_norm: grad.norm(),
        initial_grad_norm: g0,
        objective: value,
        u_map: u,
        iterations,
        history,
    })
}

/// Initial step length keeping every component of `u + t·step` positive.
fn boundary_step<T: Real>(u: &DVector<T>, step: &DVector<T>) -> T {
    let tau = T::lit(FRACTION_TO_BOUNDARY);
    u.iter()
        .zip(step.iter())
        .filter(|(_, s)| **s < T::zero())
        .map(|(u, s)| tau * *u / -*s)
        .fold(T::one(), |a, b| a.min(b))
}

/// `N(u_map, (Jᵀ Γ_E⁻¹ J + Γ_pr⁻¹)⁻¹)` with `J` the Jacobian at `u_map`.
pub fn laplace_covariance<T: Real>(
    op: &dyn ForwardMap<T>,
    u_map: &DVector<T>,
    prior: &GaussianDensity<T>,
    noise: &GaussianDensity<T>,
) -> Result<GaussianDensity<T>> {
    check_len("prior dimension", op.input_dim(), prior.dim())?;
    let jac = op.jacobian(u_map)?;
    let hess = symmetrize(&(jac.transpose() * noise.precision() * &jac + prior.precision()));
    let l = dense_cholesky(&hess)
        .ok_or_else(|| Error::SingularSystem("Laplace Hessian not positive definite".into()))?;
    GaussianDensity::full(u_map.clone(), symmetrize(&chol_inverse(&l)))
}

pub fn pointwise_std<T: Real>(g: &GaussianDensity<T>) -> DVector<T> {
    g.variances().map(|v| v.sqrt())
}
