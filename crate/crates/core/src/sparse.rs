//! Thin wrapper over faer's sparse factorizations.

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Cholesky, Lu};
use faer::sparse::SparseColMat;
use faer::Side;
use nalgebra::DMatrix;

/// Triplet accumulator for a square sparse matrix. Duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    n: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, triplets: Vec::new() }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self { n, triplets: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.triplets.push((i, j, v));
    }

    /// Adds `v` at `(i, j)` only when it falls in the lower triangle.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        if i >= j {
            self.triplets.push((i, j, v));
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn build(&self) -> Result<SparseColMat<usize, f64>, String> {
        SparseColMat::try_new_from_triplets(self.n, self.n, &self.triplets).map_err(|e| format!("{e:?}"))
    }

    /// Cholesky factorization reading only the lower triangle.
    pub fn cholesky(&self) -> Result<SpdFactor, String> {
        let m = self.build()?;
        let chol = m.sp_cholesky(Side::Lower).map_err(|e| format!("{e:?}"))?;
        Ok(SpdFactor { chol, n: self.n })
    }

    /// LU factorization with partial pivoting; needs the full matrix.
    pub fn lu(&self) -> Result<LuFactor, String> {
        let m = self.build()?;
        let lu = m.sp_lu().map_err(|e| format!("{e:?}"))?;
        Ok(LuFactor { lu, n: self.n })
    }
}

fn to_faer(rhs: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[(i, j)])
}

fn from_faer(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m.read(i, j))
}

/// Sparse Cholesky factor of a symmetric positive definite matrix.
pub struct SpdFactor {
    chol: Cholesky<usize, f64>,
    n: usize,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = to_faer(rhs);
        self.chol.solve_in_place(x.as_mut());
        from_faer(&x)
    }
}

/// Sparse LU factor.
pub struct LuFactor {
    lu: Lu<usize, f64>,
    n: usize,
}

impl LuFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = to_faer(rhs);
        self.lu.solve_in_place(x.as_mut());
        from_faer(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_and_general_systems() {
        // tridiagonal [2 -1; -1 2 -1; -1 2]
        let mut b = TripletBuilder::new(3);
        for i in 0..3 {
            b.add(i, i, 2.0);
            if i > 0 {
                b.add(i, i - 1, -1.0);
                b.add(i - 1, i, -1.0);
            }
        }
        let rhs = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 1.0]);
        let x = b.cholesky().unwrap().solve(&rhs);
        for v in x.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let x = b.lu().unwrap().solve(&rhs);
        for v in x.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let mut b = TripletBuilder::new(1);
        b.add(0, 0, 1.0);
        b.add(0, 0, 3.0);
        let x = b.cholesky().unwrap().solve(&DMatrix::from_element(1, 1, 8.0));
        assert!((x[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn indefinite_matrix_fails_cholesky() {
        let mut b = TripletBuilder::new(2);
        b.add(0, 0, 1.0);
        b.add(1, 1, -1.0);
        assert!(b.cholesky().is_err());
    }
}
