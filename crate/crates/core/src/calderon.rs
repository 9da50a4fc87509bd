//! Calderón's linearized reconstruction.
//!
//! The perturbation spectrum `F(z)` is computed from the DN difference on a
//! spherical grid `(|z|, theta, phi)`, truncated non-uniformly, and inverted
//! with a mollified composite Simpson rule. Kernels are `e^{pi i z.x +- pi a.x}`
//! for the forward step and `e^{-2 pi i x.z}` for the inverse. Lengths are
//! measured in units of `length_unit` meters so the default truncation radii
//! are expressed in cycles per decimeter.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dn::{CurrentPatternBasis, DnMatrix};
use crate::error::{EitError, Result};
use crate::geometry::BoxDomain;
use crate::quadrature::{linspace, simpson_weights};
use crate::voxel::VoxelGrid;

/// Default length unit (m) for the Fourier variables of the CGO methods.
pub const DEFAULT_LENGTH_UNIT: f64 = 0.1;

/// Absolute images add the best-fit constant; difference images do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Absolute,
    Difference,
}

impl std::str::FromStr for Mode {
    type Err = EitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Mode::Absolute),
            "difference" => Ok(Mode::Difference),
            _ => Err(EitError::InvalidParameter(format!("unknown mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Absolute => "absolute",
            Mode::Difference => "difference",
        })
    }
}

/// Tunable parameters of the method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalderonParams {
    pub tz1: f64,
    pub tz2: f64,
    pub mollifier_t: f64,
    /// `(N_|z|, N_theta, N_phi)`.
    pub nodes: [usize; 3],
    /// Base x-grid edge count; `None` selects 16, or 32 for elongated boxes.
    pub base_grid: Option<usize>,
    pub output_grid: usize,
    pub length_unit: f64,
}

impl Default for CalderonParams {
    fn default() -> Self {
        Self {
            tz1: 1.4,
            tz2: 1.7,
            mollifier_t: 0.1,
            nodes: [10, 10, 30],
            base_grid: None,
            output_grid: 64,
            length_unit: DEFAULT_LENGTH_UNIT,
        }
    }
}

impl CalderonParams {
    pub fn grid(&self) -> Result<SphericalFourierGrid> {
        SphericalFourierGrid::new(self.nodes, self.tz1, self.tz2, self.mollifier_t)
    }

    /// 16 per axis, or 32 when the longest/shortest edge ratio exceeds 1.55.
    pub fn base_grid_for(&self, domain: &BoxDomain) -> usize {
        self.base_grid
            .unwrap_or(if domain.longest_edge() / domain.shortest_edge() > 1.55 { 32 } else { 16 })
    }
}

/// Uniform nodes in `|z| in [0, T_z2]`, `theta in [0, pi]`, `phi in [0, 2 pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalFourierGrid {
    pub radii: Vec<f64>,
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    pub tz1: f64,
    pub tz2: f64,
    pub mollifier_t: f64,
    w_r: Vec<f64>,
    w_theta: Vec<f64>,
    w_phi: Vec<f64>,
}

impl SphericalFourierGrid {
    pub fn new(nodes: [usize; 3], tz1: f64, tz2: f64, mollifier_t: f64) -> Result<Self> {
        if !(tz1 > 0.0 && tz1 <= tz2) {
            return Err(EitError::InvalidParameter(format!("need 0 < T_z1 <= T_z2, got {tz1}, {tz2}")));
        }
        if mollifier_t < 0.0 {
            return Err(EitError::InvalidParameter(format!("mollifier t = {mollifier_t} < 0")));
        }
        if nodes.iter().any(|&n| n < 3) {
            return Err(EitError::InvalidParameter(format!("need at least 3 nodes per axis, got {nodes:?}")));
        }
        let [nr, nt, np] = nodes;
        Ok(Self {
            radii: linspace(0.0, tz2, nr),
            thetas: linspace(0.0, PI, nt),
            phis: linspace(0.0, 2.0 * PI, np),
            tz1,
            tz2,
            mollifier_t,
            w_r: simpson_weights(0.0, tz2, nr),
            w_theta: simpson_weights(0.0, PI, nt),
            w_phi: simpson_weights(0.0, 2.0 * PI, np),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.radii.len(), self.thetas.len(), self.phis.len()]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of node `(radius, theta, phi)`.
    pub fn index(&self, ir: usize, it: usize, ip: usize) -> usize {
        (ir * self.thetas.len() + it) * self.phis.len() + ip
    }

    fn unflatten(&self, idx: usize) -> [usize; 3] {
        let np = self.phis.len();
        let nt = self.thetas.len();
        [idx / (nt * np), (idx / np) % nt, idx % np]
    }

    /// The frequency `z` and its companion `a` (`|a| = |z|`, `a . z = 0`) at a node.
    pub fn z_and_a(&self, idx: usize) -> ([f64; 3], [f64; 3]) {
        let [ir, it, ip] = self.unflatten(idx);
        let (r, th, ph) = (self.radii[ir], self.thetas[it], self.phis[ip]);
        let (st, ct) = th.sin_cos();
        let (sp, cp) = ph.sin_cos();
        ([r * cp * st, r * sp * st, r * ct], [r * cp * ct, r * sp * ct, -r * st])
    }

    pub fn radius(&self, idx: usize) -> f64 {
        self.radii[self.unflatten(idx)[0]]
    }

    /// Quadrature weight including the Jacobian `|z|^2 sin(theta)` and the
    /// mollifier `exp(-pi t |z|^2)`.
    fn weight(&self, idx: usize) -> f64 {
        let [ir, it, ip] = self.unflatten(idx);
        let r = self.radii[ir];
        self.w_r[ir]
            * self.w_theta[it]
            * self.w_phi[ip]
            * r
            * r
            * self.thetas[it].sin()
            * (-PI * self.mollifier_t * r * r).exp()
    }
}

/// Spectrum values at the nodes of a [`SphericalFourierGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct FhatData {
    pub values: Vec<Complex64>,
    /// `max |F(-z) - conj F(z)| / max |F|`; zero for exact real perturbations.
    pub conjugate_asymmetry: f64,
}

impl FhatData {
    /// Samples an analytic spectrum `f(z)` on the grid.
    pub fn from_fn(grid: &SphericalFourierGrid, f: impl Fn([f64; 3]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.z_and_a(i).0)).collect();
        Self { values, conjugate_asymmetry: 0.0 }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

fn projected_difference(
    l_sigma: &DnMatrix,
    l_ref: &DnMatrix,
    basis: &CurrentPatternBasis,
    scale: f64,
) -> Result<DMatrix<f64>> {
    let l = basis.electrode_count();
    if l_sigma.l.shape() != (l, l) || l_ref.l.shape() != (l, l) {
        return Err(EitError::ShapeMismatch(format!(
            "DN matrices {:?}, {:?} for {l} electrodes",
            l_sigma.l.shape(),
            l_ref.l.shape()
        )));
    }
    let q = basis.matrix();
    let p = q * q.transpose();
    Ok(&p * (&l_sigma.l - &l_ref.l) * &p * scale)
}

fn bilinear(d: &DMatrix<f64>, u: &DVector<Complex64>, v: &DVector<Complex64>) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..d.ncols() {
        let mut col = Complex64::new(0.0, 0.0);
        for i in 0..d.nrows() {
            col += u[i] * d[(i, j)];
        }
        acc += col * v[j];
    }
    acc
}

fn fhat_at(d: &DMatrix<f64>, x: &[[f64; 3]], z: [f64; 3], a: [f64; 3]) -> Complex64 {
    let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
    if r2 == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let n = x.len();
    let mut e1 = DVector::from_element(n, Complex64::new(0.0, 0.0));
    let mut e2 = e1.clone();
    for (l, p) in x.iter().enumerate() {
        let zx = z[0] * p[0] + z[1] * p[1] + z[2] * p[2];
        let ax = a[0] * p[0] + a[1] * p[1] + a[2] * p[2];
        let phase = Complex64::from_polar(1.0, PI * zx);
        e1[l] = phase * (PI * ax).exp();
        e2[l] = phase * (-PI * ax).exp();
    }
    -bilinear(d, &e1, &e2) / (2.0 * PI * PI * r2)
}

/// Boundary quadrature of the perturbation spectrum.
///
/// `l_sigma` and `l_ref` are DN matrices in A/V on electrodes at `centers`
/// (meters). With `|dOmega|/L` weights at the electrode centers the density
/// form of the DN map times the weight is the electrode-current form, so
/// only the conversion to scaled length units remains.
pub fn compute_fhat(
    l_sigma: &DnMatrix,
    l_ref: &DnMatrix,
    basis: &CurrentPatternBasis,
    centers: &[[f64; 3]],
    grid: &SphericalFourierGrid,
    length_unit: f64,
) -> Result<FhatData> {
    if centers.len() != basis.electrode_count() {
        return Err(EitError::ShapeMismatch(format!(
            "{} centers for {} electrodes",
            centers.len(),
            basis.electrode_count()
        )));
    }
    let d = projected_difference(l_sigma, l_ref, basis, 1.0 / length_unit)?;
    let x: Vec<[f64; 3]> = centers.iter().map(|c| c.map(|v| v / length_unit)).collect();
    let pairs: Vec<(Complex64, Complex64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (z, a) = grid.z_and_a(i);
            (fhat_at(&d, &x, z, a), fhat_at(&d, &x, z.map(|v| -v), a))
        })
        .collect();
    let values: Vec<Complex64> = pairs.iter().map(|p| p.0).collect();
    let scale = values.iter().fold(0.0, |m: f64, v| m.max(v.norm()));
    let asym = pairs.iter().fold(0.0, |m: f64, (f, g)| m.max((g - f.conj()).norm()));
    Ok(FhatData { values, conjugate_asymmetry: if scale > 0.0 { asym / scale } else { 0.0 } })
}

/// Keeps `F(z)` for `|z| <= T_z2` where both `|Re F|` and `|Im F|` are bounded
/// by their maxima over `|z| <= T_z1`; zero elsewhere.
pub fn truncate_fhat(fhat: &FhatData, grid: &SphericalFourierGrid, tz1: f64, tz2: f64) -> Result<FhatData> {
    if tz1 > tz2 {
        return Err(EitError::InvalidParameter(format!("T_z1 = {tz1} exceeds T_z2 = {tz2}")));
    }
    if fhat.values.len() != grid.len() {
        return Err(EitError::ShapeMismatch(format!("{} values for {} nodes", fhat.values.len(), grid.len())));
    }
    let (mut re_max, mut im_max) = (0.0f64, 0.0f64);
    for (i, v) in fhat.values.iter().enumerate() {
        if grid.radius(i) <= tz1 {
            re_max = re_max.max(v.re.abs());
            im_max = im_max.max(v.im.abs());
        }
    }
    let values = fhat
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if grid.radius(i) <= tz2 && v.re.abs() <= re_max && v.im.abs() <= im_max {
                *v
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(FhatData { values, conjugate_asymmetry: fhat.conjugate_asymmetry })
}

/// Output of [`reconstruct_calderon`].
#[derive(Debug, Clone)]
pub struct CalderonImage {
    /// Conductivity (absolute) or perturbation (difference) on the output grid.
    pub image: VoxelGrid,
    /// Perturbation on the base grid before interpolation.
    pub delta_base: VoxelGrid,
    /// Largest discarded imaginary part on the base grid.
    pub max_imag: f64,
}

/// Mollified spherical inverse transform on a `base^3` grid over `domain`.
pub fn invert_fhat(
    fhat: &FhatData,
    grid: &SphericalFourierGrid,
    domain: BoxDomain,
    base: usize,
    length_unit: f64,
) -> Result<(VoxelGrid, f64)> {
    if fhat.values.len() != grid.len() {
        return Err(EitError::ShapeMismatch(format!("{} values for {} nodes", fhat.values.len(), grid.len())));
    }
    let terms: Vec<([f64; 3], Complex64)> = (0..grid.len())
        .filter_map(|i| {
            let c = fhat.values[i] * grid.weight(i);
            (c != Complex64::new(0.0, 0.0)).then(|| (grid.z_and_a(i).0, c))
        })
        .collect();
    let probe = VoxelGrid::constant(domain, [base; 3], 0.0)?;
    let values: Vec<Complex64> = (0..probe.len())
        .into_par_iter()
        .map(|idx| {
            let x = probe.center(idx).map(|v| v / length_unit);
            terms.iter().fold(Complex64::new(0.0, 0.0), |acc, (z, c)| {
                let phase = -2.0 * PI * (x[0] * z[0] + x[1] * z[1] + x[2] * z[2]);
                acc + c * Complex64::from_polar(1.0, phase)
            })
        })
        .collect();
    let max_imag = values.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    let grid_out = VoxelGrid::new(domain, [base; 3], values.iter().map(|v| v.re).collect())?;
    Ok((grid_out, max_imag))
}

/// Inverts a truncated spectrum; absolute mode adds `sigma_best` (S/m).
pub fn reconstruct_calderon(
    fhat_r: &FhatData,
    grid: &SphericalFourierGrid,
    domain: BoxDomain,
    params: &CalderonParams,
    mode: Mode,
    sigma_best: f64,
) -> Result<CalderonImage> {
    let base = params.base_grid_for(&domain);
    let (delta, max_imag) = invert_fhat(fhat_r, grid, domain, base, params.length_unit)?;
    let max_real = delta.max_abs();
    if max_imag > 0.1 * max_real {
        warn!("imaginary residual {max_imag:.3e} exceeds 10% of the real part {max_real:.3e}");
    }
    let offset = match mode {
        Mode::Absolute => sigma_best,
        Mode::Difference => 0.0,
    };
    let mut image = delta.resample([params.output_grid; 3])?;
    for v in image.values.iter_mut() {
        *v += offset;
    }
    Ok(CalderonImage { image, delta_base: delta, max_imag })
}

/// Full pipeline from DN matrices: spectrum, truncation, inversion.
#[allow(clippy::too_many_arguments)]
pub fn calderon_from_dn(
    l_sigma: &DnMatrix,
    l_ref: &DnMatrix,
    basis: &CurrentPatternBasis,
    centers: &[[f64; 3]],
    domain: BoxDomain,
    params: &CalderonParams,
    mode: Mode,
    sigma_best: f64,
) -> Result<CalderonImage> {
    let grid = params.grid()?;
    let fhat = compute_fhat(l_sigma, l_ref, basis, centers, &grid, params.length_unit)?;
    let fhat_r = truncate_fhat(&fhat, &grid, params.tz1, params.tz2)?;
    reconstruct_calderon(&fhat_r, &grid, domain, params, mode, sigma_best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dn::mean_free_basis;

    fn grid() -> SphericalFourierGrid {
        CalderonParams::default().grid().unwrap()
    }

    #[test]
    fn z_and_a_are_orthogonal_with_equal_norm() {
        let g = grid();
        for i in (0..g.len()).step_by(37) {
            let (z, a) = g.z_and_a(i);
            let dot = z[0] * a[0] + z[1] * a[1] + z[2] * a[2];
            let nz = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            assert!(dot.abs() < 1e-14);
            assert!((nz - na).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_maps_give_zero_spectrum() {
        let basis = mean_free_basis(4);
        let l = DnMatrix { l: DMatrix::from_fn(4, 4, |i, j| if i == j { 0.75 } else { -0.25 }) };
        let centers = [[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]];
        let f = compute_fhat(&l, &l, &basis, &centers, &grid(), 0.1).unwrap();
        assert!(f.values.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn truncation_keeps_inner_band_and_drops_spikes() {
        let g = grid();
        let f = FhatData::from_fn(&g, |z| {
            let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
            Complex64::new((-r).exp(), 0.1 * (-r).exp())
        });
        let same = truncate_fhat(&f, &g, g.tz2, g.tz2).unwrap();
        assert_eq!(same.values, f.values);
        let empty = truncate_fhat(&f, &g, 1e-3, 1e-3).unwrap();
        assert!(empty.values.iter().skip(g.thetas.len() * g.phis.len()).all(|v| v.norm() == 0.0));
        let mut spiked = f.clone();
        let spike = g.index(g.radii.len() - 1, 3, 4);
        spiked.values[spike] = Complex64::new(10.0, 0.0);
        let t = truncate_fhat(&spiked, &g, 1.4, 1.7).unwrap();
        assert_eq!(t.values[spike], Complex64::new(0.0, 0.0));
        let kept = g.index(g.radii.len() - 1, 3, 5);
        assert_eq!(t.values[kept], f.values[kept]);
    }

    #[test]
    fn zero_spectrum_gives_constant_background() {
        let g = grid();
        let f = FhatData::from_fn(&g, |_| Complex64::new(0.0, 0.0));
        let img = reconstruct_calderon(&f, &g, BoxDomain::tank(), &CalderonParams::default(), Mode::Absolute, 0.024)
            .unwrap();
        assert_eq!(img.image.shape, [64, 64, 64]);
        assert!(img.image.values.iter().all(|v| *v == 0.024));
    }

    #[test]
    fn inversion_is_linear_and_mollifier_reduces_peak() {
        let params = CalderonParams::default();
        let g = grid();
        let d = BoxDomain::tank();
        let f1 = FhatData::from_fn(&g, |z| Complex64::new((-PI * (z[0] * z[0] + z[1] * z[1])).exp(), 0.0));
        let f2 = FhatData::from_fn(&g, |z| Complex64::from_polar(1.0, 2.0 * PI * 0.3 * z[2]));
        let mut sum = f1.scaled(2.0);
        for (s, v) in sum.values.iter_mut().zip(&f2.values) {
            *s -= v * 0.5;
        }
        let r = |f: &FhatData| invert_fhat(f, &g, d, 16, params.length_unit).unwrap().0;
        let (r1, r2, rs) = (r(&f1), r(&f2), r(&sum));
        for i in 0..rs.len() {
            assert!((rs.values[i] - (2.0 * r1.values[i] - 0.5 * r2.values[i])).abs() < 1e-10);
        }
        let mut last = f64::INFINITY;
        for t in [0.05, 0.1, 0.2] {
            let gt = SphericalFourierGrid::new(params.nodes, params.tz1, params.tz2, t).unwrap();
            let peak = invert_fhat(&f1, &gt, d, 16, params.length_unit).unwrap().0.max_abs();
            assert!(peak < last);
            last = peak;
        }
    }
}
