//! Gaussian priors over nodal conductivity fields: the elliptic-operator
//! prior used for inference and the squared-exponential autocorrelation
//! prior used to draw ground-truth fields.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianDensity;
use crate::mesh_fem::{boundary_mass, lumped_mass, mass_matrix, stiffness_matrix, Mesh};
use crate::scalar::Real;

/// Coefficients of `A u = -γ Δu + δ u` with Robin boundary `∇u·n + β u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorPriorSpec<T> {
    pub gamma: T,
    pub delta: T,
    pub beta_bnd: T,
    pub mean_value: T,
}

impl<T: Real> Default for OperatorPriorSpec<T> {
    fn default() -> Self {
        let gamma = T::lit(0.1);
        let delta = T::lit(0.5);
        Self {
            gamma,
            delta,
            beta_bnd: (gamma * delta).sqrt(),
            mean_value: T::lit(2.0),
        }
    }
}

/// Squared-exponential kernel parameters for ground-truth draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutocorrSpec<T> {
    pub sigma2: T,
    pub corr_len: T,
    pub mean_value: T,
}

impl<T: Real> Default for AutocorrSpec<T> {
    fn default() -> Self {
        Self {
            sigma2: T::lit(2.0),
            corr_len: T::lit(0.5),
            mean_value: T::lit(2.0),
        }
    }
}

fn operator_matrix<T: Real>(mesh: &Mesh<T>, spec: &OperatorPriorSpec<T>) -> Result<DMatrix<T>> {
    if !(spec.gamma > T::zero()) || !(spec.delta > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "prior coefficients must be positive (gamma={}, delta={})",
            spec.gamma, spec.delta
        )));
    }
    let k = stiffness_matrix(mesh).to_dense();
    let m = mass_matrix(mesh).to_dense();
    let b = boundary_mass(mesh, |_| true).to_dense();
    Ok(k * spec.gamma + m * spec.delta + b * spec.beta_bnd)
}

/// `Γ = A⁻¹ M A⁻¹` with `M` the lumped mass.
pub fn build_operator_prior<T: Real>(mesh: &Mesh<T>, spec: &OperatorPriorSpec<T>) -> Result<GaussianDensity<T>> {
    let a = operator_matrix(mesh, spec)?;
    let n = a.nrows();
    let a_inv = a
        .try_inverse()
        .ok_or_else(|| Error::Construction("prior operator is singular".into()))?;
    let ml = lumped_mass(mesh);
    let mut scaled = a_inv.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= ml[j];
    }
    let cov = &scaled * &a_inv;
    GaussianDensity::full(DVector::from_element(n, spec.mean_value), cov)
}

/// `Γ⁻¹ = A M⁻¹ A`, assembled directly rather than by inverting `Γ`.
pub fn operator_prior_precision<T: Real>(mesh: &Mesh<T>, spec: &OperatorPriorSpec<T>) -> Result<DMatrix<T>> {
    let a = operator_matrix(mesh, spec)?;
    let ml = lumped_mass(mesh);
    let mut scaled = a.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row /= ml[i];
    }
    Ok(crate::linalg::symmetrize(&(&a * scaled)))
}

const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7];
/// Further steps in units of machine epsilon, reached only in single precision.
const JITTER_EPS_STEPS: [f64; 3] = [1e2, 1e3, 1e4];

/// Dense `Γ_ij = σ² exp(-|x_i - x_j|² / (2ℓ²))` with escalating diagonal
/// jitter when the kernel matrix is numerically singular.
pub fn build_autocorr_cov<T: Real>(points: &[[T; 2]], spec: &AutocorrSpec<T>) -> Result<GaussianDensity<T>> {
    if !(spec.sigma2 > T::zero()) || !(spec.corr_len > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "kernel needs positive variance and length (sigma2={}, corr_len={})",
            spec.sigma2, spec.corr_len
        )));
    }
    let n = points.len();
    for i in 0..n {
        for j in 0..i {
            if points[i] == points[j] {
                return Err(Error::Construction(format!(
                    "duplicate points {j} and {i} make the kernel rank deficient"
                )));
            }
        }
    }
    let two_l2 = T::lit(2.0) * spec.corr_len * spec.corr_len;
    let kernel = DMatrix::from_fn(n, n, |i, j| {
        let dx = points[i][0] - points[j][0];
        let dy = points[i][1] - points[j][1];
        spec.sigma2 * (-(dx * dx + dy * dy) / two_l2).exp()
    });
    let mean = DVector::from_element(n, spec.mean_value);
    let eps = T::EPSILON;
    let ladder = JITTER_LADDER
        .into_iter()
        .chain(JITTER_EPS_STEPS.iter().map(|k| k * eps).filter(|r| *r > 1e-7));
    for rel in ladder {
        let mut k = kernel.clone();
        if rel > 0.0 {
            let j = T::lit(rel) * spec.sigma2;
            for i in 0..n {
                k[(i, i)] += j;
            }
        }
        if let Ok(g) = GaussianDensity::full(mean.clone(), k) {
            return Ok(g);
        }
    }
    Err(Error::Construction(
        "autocorrelation kernel not positive definite after jitter".into(),
    ))
}

/// Text container: `#`-prefixed `key=value` header, a `mean` row, then one
/// covariance row per line.
pub fn save_density<T: Real>(
    path: impl AsRef<Path>,
    density: &GaussianDensity<T>,
    params: &[(&str, String)],
) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# gaussian-density d={}", density.dim()).unwrap();
    for (k, v) in params {
        writeln!(out, "# {k}={v}").unwrap();
    }
    let row = |v: &mut dyn Iterator<Item = T>| {
        v.map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",")
    };
    writeln!(out, "mean,{}", row(&mut density.mean().iter().copied())).unwrap();
    let cov = density.covariance();
    for r in cov.row_iter() {
        writeln!(out, "cov,{}", row(&mut r.iter().copied())).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a container written by [`save_density`], returning the header
/// parameters alongside the density.
#[allow(clippy::type_complexity)]
pub fn load_density<T: Real>(path: impl AsRef<Path>) -> Result<(GaussianDensity<T>, Vec<(String, String)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut d = None;
    let mut params = Vec::new();
    let mut mean: Option<DVector<T>> = None;
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(h) = line.strip_prefix("# ") {
            if let Some(v) = h.strip_prefix("gaussian-density d=") {
                d = Some(v.parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?);
            } else if let Some((k, v)) = h.split_once('=') {
                params.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        let mut fields = line.split(',');
        let tag = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.parse::<T>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad number {f:?}"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        match tag {
            "mean" => mean = Some(DVector::from_vec(values)),
            "cov" => rows.push(values),
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unknown row tag {other:?}"),
                })
            }
        }
    }
    let d = d.ok_or_else(|| Error::Schema("missing gaussian-density header".into()))?;
    let mean = mean.ok_or_else(|| Error::Schema("missing mean row".into()))?;
    if mean.len() != d || rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Schema(format!("expected {d}-dimensional mean and {d}x{d} covariance")));
    }
    let cov = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    Ok((GaussianDensity::full(mean, cov)?, params))
}
