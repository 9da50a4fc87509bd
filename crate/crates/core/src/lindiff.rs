//! Linearized time-difference imaging with a squared-exponential smoothness prior.

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::prelude::*;
use faer::{Mat, Parallelism, Side};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{EitError, Result};
use crate::forward::JacobianMatrix;

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m.read(i, j))
}

/// Gaussian prior on nodal conductivity changes,
/// `Gamma_p(i, j) = std^2 exp(-|x_i - x_j|^2 / (2 a^2))`.
#[derive(Debug)]
pub struct SmoothnessPrior {
    pub std_sigma: f64,
    pub correlation_length: f64,
    pub covariance: DMatrix<f64>,
    /// Diagonal jitter that was needed for the factorization (0 if none).
    pub jitter: f64,
    factor: faer::linalg::solvers::Cholesky<f64>,
}

impl SmoothnessPrior {
    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// `Gamma_p^{-1}` (equal to `L_p^T L_p`).
    pub fn precision(&self) -> DMatrix<f64> {
        from_faer(&self.precision_faer())
    }

    fn precision_faer(&self) -> Mat<f64> {
        let inv = self.factor.inverse();
        // Symmetrize the round-off.
        Mat::from_fn(inv.nrows(), inv.ncols(), |i, j| 0.5 * (inv.read(i, j) + inv.read(j, i)))
    }

    /// Applies `L_p` with `L_p^T L_p = Gamma_p^{-1}`, i.e. the inverse
    /// Cholesky factor.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        let l = self.factor.compute_l();
        let mut rhs = Mat::from_fn(x.len(), 1, |i, _| x[i]);
        solve_lower_triangular_in_place(l.as_ref(), rhs.as_mut(), Parallelism::None);
        DVector::from_fn(x.len(), |i, _| rhs.read(i, 0))
    }
}

/// Correlation length `a` such that the covariance at distance `d` is
/// `cov_at_d` times the variance.
pub fn correlation_length(d: f64, cov_at_d: f64) -> f64 {
    d / (2.0 * (1.0 / cov_at_d).ln()).sqrt()
}

pub fn build_prior(nodes: &[[f64; 3]], std_sigma: f64, d: f64, cov_at_d: f64) -> Result<SmoothnessPrior> {
    if !(std_sigma > 0.0) || !(d > 0.0) || !(cov_at_d > 0.0 && cov_at_d < 1.0) {
        return Err(EitError::InvalidParameter(format!(
            "prior needs std > 0, d > 0, 0 < cov < 1; got {std_sigma}, {d}, {cov_at_d}"
        )));
    }
    let a = correlation_length(d, cov_at_d);
    let var = std_sigma * std_sigma;
    let n = nodes.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .map(|i| {
                    let (p, q) = (nodes[i], nodes[j]);
                    let r2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    var * (-r2 / (2.0 * a * a)).exp()
                })
                .collect()
        })
        .collect();
    let covariance = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
    drop(cols);
    let mut c = to_faer(&covariance);
    let mut jitter = 0.0;
    let factor = match c.cholesky(Side::Lower) {
        Ok(f) => f,
        Err(_) => {
            jitter = 1e-10 * var;
            for i in 0..n {
                c.write(i, i, c.read(i, i) + jitter);
            }
            c.cholesky(Side::Lower)
                .map_err(|_| EitError::FactorizationFailure("prior covariance is not positive definite".into()))?
        }
    };
    Ok(SmoothnessPrior { std_sigma, correlation_length: a, covariance, jitter, factor })
}

/// Independent Gaussian voltage noise; the difference of two frames has
/// variance `std_1^2 + std_2^2` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Per-channel standard deviation of the voltage difference (V).
    pub std: Vec<f64>,
}

impl NoiseModel {
    pub fn new(std: Vec<f64>) -> Result<Self> {
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(EitError::InvalidParameter("noise standard deviations must be positive".into()));
        }
        Ok(Self { std })
    }

    /// Per-frame std `max|V| 10^(-snr/20)` for each frame, combined for the difference.
    pub fn from_snr(v1: &[f64], v2: &[f64], snr_db: f64) -> Result<Self> {
        if v1.len() != v2.len() {
            return Err(EitError::ShapeMismatch(format!("{} vs {} channels", v1.len(), v2.len())));
        }
        let level = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs())) * 10f64.powf(-snr_db / 20.0);
        let s = (level(v1).powi(2) + level(v2).powi(2)).sqrt();
        Self::new(vec![s; v1.len()])
    }

    /// Diagonal of `Gamma_de^{-1}`.
    pub fn precision(&self) -> Vec<f64> {
        self.std.iter().map(|s| 1.0 / (s * s)).collect()
    }
}

/// Factorized normal equations `(J^T W J + Gamma_p^{-1}) x = J^T W dV`.
pub struct LinearDifferenceSolver {
    jtw: Mat<f64>,
    factor: faer::linalg::solvers::Cholesky<f64>,
}

impl LinearDifferenceSolver {
    pub fn new(jac: &JacobianMatrix, noise: &NoiseModel, prior: &SmoothnessPrior) -> Result<Self> {
        let j = &jac.matrix;
        if noise.std.len() != j.nrows() || prior.dim() != j.ncols() {
            return Err(EitError::ShapeMismatch(format!(
                "Jacobian {:?}, {} noise channels, prior of size {}",
                j.shape(),
                noise.std.len(),
                prior.dim()
            )));
        }
        let w = noise.precision();
        let jf = to_faer(j);
        let jtw = Mat::from_fn(j.ncols(), j.nrows(), |r, c| j[(c, r)] * w[c]);
        let mut h = &jtw * &jf + prior.precision_faer();
        let n = h.nrows();
        for c in 0..n {
            for r in c + 1..n {
                let v = 0.5 * (h.read(r, c) + h.read(c, r));
                h.write(r, c, v);
                h.write(c, r, v);
            }
        }
        let factor = h
            .cholesky(Side::Lower)
            .map_err(|_| EitError::FactorizationFailure("normal equations are not positive definite".into()))?;
        Ok(Self { jtw, factor })
    }

    pub fn solve(&self, dv: &[f64]) -> Result<Vec<f64>> {
        if dv.len() != self.jtw.ncols() {
            return Err(EitError::ShapeMismatch(format!("{} data for {} channels", dv.len(), self.jtw.ncols())));
        }
        let d = Mat::from_fn(dv.len(), 1, |i, _| dv[i]);
        let rhs = &self.jtw * &d;
        let x = self.factor.solve(&rhs);
        Ok((0..x.nrows()).map(|i| x.read(i, 0)).collect())
    }
}

/// Tikhonov solution with the given noise and prior models.
pub fn reconstruct_linear_diff(
    jac: &JacobianMatrix,
    dv: &[f64],
    noise: &NoiseModel,
    prior: &SmoothnessPrior,
) -> Result<Vec<f64>> {
    LinearDifferenceSolver::new(jac, noise, prior)?.solve(dv)
}
