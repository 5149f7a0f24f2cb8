//! Banded symmetric storage and a direct Cholesky solver for the finite
//! element systems, plus a few dense helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Symmetric matrix stored as its lower band.
///
/// Row `i` keeps columns `i - bandwidth ..= i`; entries outside the band are
/// structurally zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSym<T> {
    n: usize,
    bandwidth: usize,
    data: Vec<T>,
}

impl<T: Real> BandedSym<T> {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![T::zero(); n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if j > i { (j, i) } else { (i, j) };
        let off = r - c;
        (off <= self.bandwidth).then(|| r * (self.bandwidth + 1) + self.bandwidth - off)
    }

    /// Value at `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.slot(i, j).map_or(T::zero(), |s| self.data[s])
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    ///
    /// Panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.bandwidth));
        self.data[s] += v;
    }

    pub fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bandwidth);
            let mut acc = self.get(i, i) * x[i];
            for j in lo..i {
                let a = self.get(i, j);
                acc += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += acc;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-band Cholesky factorization `A = L Lᵀ`.
    pub fn cholesky(&self) -> Result<BandedCholesky<T>> {
        let bw = self.bandwidth;
        let mut l = self.clone();
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            let mut d = l.get(j, j);
            for k in lo..j {
                let v = l.get(j, k);
                d -= v * v;
            }
            if !(d > T::zero()) || !d.finite() {
                return Err(Error::SingularSystem(format!(
                    "non-positive pivot {d} at row {j}"
                )));
            }
            let d = d.sqrt();
            let sj = l.slot(j, j).unwrap();
            l.data[sj] = d;
            let hi = (j + bw).min(self.n - 1);
            for i in (j + 1)..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut v = l.get(i, j);
                for k in lo_i..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                let s = l.slot(i, j).unwrap();
                l.data[s] = v / d;
            }
        }
        Ok(BandedCholesky { l })
    }
}

/// Lower-triangular band factor produced by [`BandedSym::cholesky`].
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    l: BandedSym<T>,
}

impl<T: Real> BandedCholesky<T> {
    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        let n = self.l.n;
        let bw = self.l.bandwidth;
        let mut x = b.clone();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut v = x[i];
            for k in lo..i {
                v -= self.l.get(i, k) * x[k];
            }
            x[i] = v / self.l.get(i, i);
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut v = x[i];
            for k in (i + 1)..=hi {
                v -= self.l.get(k, i) * x[k];
            }
            x[i] = v / self.l.get(i, i);
        }
        x
    }

    pub fn log_det(&self) -> T {
        (0..self.l.n).fold(T::zero(), |acc, i| acc + self.l.get(i, i).ln())
    }
}

/// Dense Cholesky returning the lower factor, or `None` if the matrix is not
/// numerically positive definite.
pub fn dense_cholesky<T: Real>(a: &DMatrix<T>) -> Option<DMatrix<T>> {
    let chol = nalgebra::Cholesky::new(a.clone())?;
    let l = chol.l();
    l.diagonal().iter().all(|d| *d > T::zero() && d.finite()).then_some(l)
}

/// `log det(L Lᵀ)` from a lower Cholesky factor.
pub fn chol_log_det<T: Real>(l: &DMatrix<T>) -> T {
    l.diagonal().iter().fold(T::zero(), |acc, d| acc + d.ln()) * T::lit(2.0)
}

/// Solves `L Lᵀ x = b` for a lower factor `L`.
pub fn chol_solve<T: Real>(l: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has positive diagonal")
}

/// `(L Lᵀ)⁻¹` for a lower factor `L`.
pub fn chol_inverse<T: Real>(l: &DMatrix<T>) -> DMatrix<T> {
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("Cholesky factor has positive diagonal");
    let inv = linv.transpose() * &linv;
    symmetrize(&inv)
}

pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * T::lit(0.5)
}

/// Largest absolute asymmetry `max |A - Aᵀ|`.
pub fn asymmetry<T: Real>(a: &DMatrix<T>) -> T {
    let mut m = T::zero();
    for i in 0..a.nrows() {
        for j in 0..i {
            m = m.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> BandedSym<f64> {
        let mut a = BandedSym::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn banded_solve_matches_dense() {
        let a = tridiag(7);
        let b = DVector::from_fn(7, |i, _| (i as f64).sin() + 1.0);
        let x = a.cholesky().unwrap().solve(&b);
        let dense = a.to_dense().lu().solve(&b).unwrap();
        assert!((x - dense).amax() < 1e-13);
    }

    #[test]
    fn banded_mul_matches_dense() {
        let mut a = BandedSym::<f64>::zeros(6, 2);
        for i in 0..6usize {
            for j in i.saturating_sub(2)..=i {
                a.add(i, j, (i * 7 + j) as f64 * 0.1 + if i == j { 5.0 } else { 0.0 });
            }
        }
        let x = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        assert!((a.mul_vec(&x) - a.to_dense() * &x).amax() < 1e-13);
    }

    #[test]
    fn indefinite_band_is_rejected() {
        let mut a = BandedSym::<f64>::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(a.cholesky(), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn log_det_of_tridiagonal() {
        // det of the 2,-1 tridiagonal of size n is n+1
        let a = tridiag(5);
        let ld = a.cholesky().unwrap().log_det() * 2.0;
        assert!((ld - 6f64.ln()).abs() < 1e-12);
    }
}
