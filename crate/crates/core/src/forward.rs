//! Common interface over parameter-to-observable maps: the PDE-backed
//! operator and plain linear surrogates.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Result};
use crate::scalar::Real;

pub trait ForwardMap<T: Real>: Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn apply(&self, u: &DVector<T>) -> Result<DVector<T>>;

    /// `J(u)ᵀ w`.
    fn vjp(&self, u: &DVector<T>, w: &DVector<T>) -> Result<DVector<T>>;

    /// Dense `q × d` Jacobian.
    fn jacobian(&self, u: &DVector<T>) -> Result<DMatrix<T>>;

    /// Evaluates `F(u)`, forms `w = weight(F(u))`, and returns `(F(u), J(u)ᵀ w)`.
    /// Implementations may share work between the two.
    fn apply_and_pullback(
        &self,
        u: &DVector<T>,
        weight: &dyn Fn(&DVector<T>) -> DVector<T>,
    ) -> Result<(DVector<T>, DVector<T>)> {
        let y = self.apply(u)?;
        let w = weight(&y);
        let g = self.vjp(u, &w)?;
        Ok((y, g))
    }

    /// Whether inputs must be strictly positive (elliptic coefficients).
    fn requires_positive_input(&self) -> bool {
        false
    }
}

/// `F(u) = A u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T: Real> {
    pub matrix: DMatrix<T>,
}

impl<T: Real> LinearMap<T> {
    pub fn new(matrix: DMatrix<T>) -> Self {
        Self { matrix }
    }
}

impl<T: Real> ForwardMap<T> for LinearMap<T> {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, u: &DVector<T>) -> Result<DVector<T>> {
        check_len("linear map input", self.matrix.ncols(), u.len())?;
        Ok(&self.matrix * u)
    }

    fn vjp(&self, u: &DVector<T>, w: &DVector<T>) -> Result<DVector<T>> {
        check_len("linear map input", self.matrix.ncols(), u.len())?;
        check_len("linear map cotangent", self.matrix.nrows(), w.len())?;
        Ok(self.matrix.tr_mul(w))
    }

    fn jacobian(&self, u: &DVector<T>) -> Result<DMatrix<T>> {
        check_len("linear map input", self.matrix.ncols(), u.len())?;
        Ok(self.matrix.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_jacobian_is_the_matrix() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let map = LinearMap::new(a.clone());
        let u = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        assert_eq!(map.jacobian(&u).unwrap(), a);
        let w = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(map.vjp(&u, &w).unwrap(), a.transpose() * w);
    }
}
