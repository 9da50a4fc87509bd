//! The `t^exp` and `t^0` scattering-transform reconstructions.
//!
//! Scattering data `t(xi, zeta(xi))` are computed from the DN difference on a
//! Cartesian `xi` grid, inverted with a 3D Simpson rule to the Schrödinger
//! potential `q`, and the conductivity is recovered from the Dirichlet problem
//! `(-Laplace + q) u = 0`, `u = 1` on the boundary, as `sigma_best * u^2`.
//! Fourier variables use the kernel `e^{i x.xi}` and lengths in units of
//! `length_unit` meters.

use std::f64::consts::PI;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calderon::{Mode, DEFAULT_LENGTH_UNIT};
use crate::dn::{CurrentPatternBasis, DnMatrix};
use crate::error::{EitError, Result};
use crate::forward::element_geometry;
use crate::geometry::BoxDomain;
use crate::mesh::{mesh_box_uniform, TetMesh};
use crate::quadrature::{linspace, simpson_weights};
use crate::sparse::TripletBuilder;
use crate::voxel::VoxelGrid;

/// Which approximation of the CGO traces enters the scattering data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TMethod {
    /// Born approximation: traces replaced by `e^{i x.zeta}`.
    Exp,
    /// Traces from the boundary integral equation with the Laplace Green's function.
    Zero,
}

impl std::fmt::Display for TMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TMethod::Exp => "texp",
            TMethod::Zero => "t0",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TParams {
    pub t_xi: f64,
    pub cap: f64,
    pub xi_nodes: usize,
    pub q_grid: usize,
    pub schrodinger_elements: usize,
    pub output_grid: usize,
    pub length_unit: f64,
}

impl Default for TParams {
    fn default() -> Self {
        Self {
            t_xi: 11.0,
            cap: 20.0,
            xi_nodes: 21,
            q_grid: 21,
            schrodinger_elements: 21_000,
            output_grid: 64,
            length_unit: DEFAULT_LENGTH_UNIT,
        }
    }
}

/// A frequency `xi` and an auxiliary `zeta` with `zeta.zeta = 0` and
/// `(xi + zeta).(xi + zeta) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZetaChoice {
    pub xi: [f64; 3],
    pub zeta: [Complex64; 3],
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Unit vector orthogonal to `xi`, seeded by the axis where `|xi|` has its
/// smallest component (first such axis on ties).
fn orthogonal_unit(xi: [f64; 3]) -> [f64; 3] {
    let mut axis = 0;
    for a in 1..3 {
        if xi[a].abs() < xi[axis].abs() {
            axis = a;
        }
    }
    let n2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let proj = xi[axis] / n2;
    for a in 0..3 {
        e[a] -= proj * xi[a];
    }
    let n = norm3(e);
    e.map(|v| v / n)
}

/// Minimal-norm choice `zeta = -xi/2 + i (|xi|/2) e(xi)`, so `|zeta| = |xi|/sqrt 2`.
pub fn minimal_zeta(xi: [f64; 3]) -> Result<ZetaChoice> {
    let n = norm3(xi);
    if n == 0.0 {
        return Err(EitError::ZeroXi);
    }
    let e = orthogonal_unit(xi);
    let zeta = [0, 1, 2].map(|a| Complex64::new(-0.5 * xi[a], 0.5 * n * e[a]));
    Ok(ZetaChoice { xi, zeta })
}

/// Laplace Green's function between distinct centers; zero diagonal.
pub fn g0_matrix(centers: &[[f64; 3]]) -> Result<DMatrix<f64>> {
    let l = centers.len();
    let mut g = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in i + 1..l {
            let r = norm3([0, 1, 2].map(|a| centers[i][a] - centers[j][a]));
            if r < 1e-12 {
                return Err(EitError::DuplicateCenters(i, j));
            }
            let v = 1.0 / (4.0 * PI * r);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Precomputed matrices shared by every `xi` node.
#[derive(Debug, Clone)]
pub struct ScatteringOperator {
    q: DMatrix<f64>,
    /// `Q^T (L_sigma - L_ref) Q` in scaled length units.
    d_q: DMatrix<f64>,
    /// Centers in scaled length units.
    x: Vec<[f64; 3]>,
    /// Inverse of `I + A` and its 1-norm condition number, when `A` is formed.
    bie: Option<(DMatrix<f64>, f64)>,
}

impl ScatteringOperator {
    /// Builds the operator from DN matrices in A/V and centers in meters.
    ///
    /// With uniform weights `|dOmega|/L` the density-form DN map times the
    /// weight is the electrode-current form, so `A = Q^T G0 Q D_Q`.
    pub fn new(
        l_sigma: &DnMatrix,
        l_ref: &DnMatrix,
        basis: &CurrentPatternBasis,
        centers: &[[f64; 3]],
        length_unit: f64,
        method: TMethod,
    ) -> Result<Self> {
        let l = basis.electrode_count();
        if centers.len() != l || l_sigma.l.shape() != (l, l) || l_ref.l.shape() != (l, l) {
            return Err(EitError::ShapeMismatch(format!(
                "{} centers and DN shapes {:?}, {:?} for {l} electrodes",
                centers.len(),
                l_sigma.l.shape(),
                l_ref.l.shape()
            )));
        }
        let q = basis.matrix().clone();
        let d_q = q.transpose() * (&l_sigma.l - &l_ref.l) * &q / length_unit;
        let x: Vec<[f64; 3]> = centers.iter().map(|c| c.map(|v| v / length_unit)).collect();
        let bie = match method {
            TMethod::Exp => None,
            TMethod::Zero => {
                let g = g0_matrix(&x)?;
                let a = q.transpose() * g * &q * &d_q;
                let m = DMatrix::identity(a.nrows(), a.ncols()) + a;
                let inv = m.clone().lu().try_inverse();
                let (inv, cond) = match inv {
                    Some(inv) => {
                        let cond = norm1(&m) * norm1(&inv);
                        (inv, cond)
                    }
                    None => (DMatrix::zeros(m.nrows(), m.ncols()), f64::INFINITY),
                };
                Some((inv, cond))
            }
        };
        Ok(Self { q, d_q, x, bie })
    }

    pub fn basis_dim(&self) -> usize {
        self.q.ncols()
    }

    /// Condition estimate of `I + A` (`None` for the Born approximation).
    pub fn bie_condition(&self) -> Option<f64> {
        self.bie.as_ref().map(|b| b.1)
    }

    /// Boundary values `e^{i x.v}` at the centers.
    fn plane_wave(&self, v: [Complex64; 3]) -> DVector<Complex64> {
        DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|p| {
                let s = v[0] * p[0] + v[1] * p[1] + v[2] * p[2];
                (Complex64::i() * s).exp()
            }),
        )
    }

    fn to_basis(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let n = self.q.ncols();
        DVector::from_fn(n, |j, _| {
            (0..self.q.nrows()).fold(Complex64::new(0.0, 0.0), |acc, i| acc + v[i] * self.q[(i, j)])
        })
    }

    /// Coefficients `c = Q^T e^{i x.zeta}`.
    pub fn rhs(&self, zeta: &ZetaChoice) -> DVector<Complex64> {
        self.to_basis(&self.plane_wave(zeta.zeta))
    }

    /// Solves `(I + A) b = c` for the CGO trace coefficients.
    pub fn solve_bie(&self, zeta: &ZetaChoice) -> Result<DVector<Complex64>> {
        let (inv, cond) = self
            .bie
            .as_ref()
            .ok_or_else(|| EitError::InvalidParameter("operator was built without the BIE".into()))?;
        if !(*cond <= 1e12) {
            return Err(EitError::NearSingularBie(*cond));
        }
        let c = self.rhs(zeta);
        Ok(DVector::from_fn(c.len(), |i, _| {
            (0..c.len()).fold(Complex64::new(0.0, 0.0), |acc, j| acc + c[j] * inv[(i, j)])
        }))
    }

    /// `[e^{-i x.(xi + zeta)}]^T Q D_Q coeffs`.
    fn evaluate(&self, zeta: &ZetaChoice, coeffs: &DVector<Complex64>) -> Complex64 {
        let v = [0, 1, 2].map(|a| -(zeta.zeta[a] + zeta.xi[a]));
        let left = self.to_basis(&self.plane_wave(v));
        let n = self.d_q.nrows();
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..n {
            let col = (0..n).fold(Complex64::new(0.0, 0.0), |s, i| s + left[i] * self.d_q[(i, j)]);
            acc += col * coeffs[j];
        }
        acc
    }

    /// Untruncated scattering value at one node.
    pub fn t_value(&self, zeta: &ZetaChoice) -> Result<Complex64> {
        let coeffs = match self.bie {
            None => self.rhs(zeta),
            Some(_) => self.solve_bie(zeta)?,
        };
        Ok(self.evaluate(zeta, &coeffs))
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Uniform Cartesian `xi` nodes on `[-T_xi, T_xi]^3` with an odd count per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiGrid {
    pub t_xi: f64,
    pub nodes: usize,
}

impl XiGrid {
    pub fn new(t_xi: f64, nodes: usize) -> Result<Self> {
        if !(t_xi > 0.0) {
            return Err(EitError::InvalidParameter(format!("T_xi = {t_xi} must be positive")));
        }
        if nodes < 3 || nodes.is_multiple_of(2) {
            return Err(EitError::InvalidParameter(format!("xi grid needs an odd node count >= 3, got {nodes}")));
        }
        Ok(Self { t_xi, nodes })
    }

    pub fn axis(&self) -> Vec<f64> {
        let mut a = linspace(-self.t_xi, self.t_xi, self.nodes);
        a[self.nodes / 2] = 0.0;
        a
    }

    pub fn len(&self) -> usize {
        self.nodes.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nodes * (j + self.nodes * k)
    }

    pub fn xi(&self, idx: usize) -> [f64; 3] {
        let a = self.axis();
        let n = self.nodes;
        [a[idx % n], a[(idx / n) % n], a[idx / (n * n)]]
    }
}

/// Scattering values on an [`XiGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringData {
    pub grid: XiGrid,
    pub method: TMethod,
    pub cap: f64,
    pub values: Vec<Complex64>,
    /// Nodes zeroed because the boundary integral system was near singular.
    pub singular_nodes: usize,
    /// Nodes zeroed by the amplitude cap.
    pub capped_nodes: usize,
    /// `max |t(-xi) - conj t(xi)| / max |t|`.
    pub conjugate_asymmetry: f64,
}

impl ScatteringData {
    /// Samples an analytic `t(xi)` without truncation.
    pub fn from_fn(grid: XiGrid, method: TMethod, f: impl Fn([f64; 3]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.xi(i))).collect();
        Self { grid, method, cap: f64::INFINITY, values, singular_nodes: 0, capped_nodes: 0, conjugate_asymmetry: 0.0 }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// CSV with columns `xi_x, xi_y, xi_z, re, im`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["xi_x", "xi_y", "xi_z", "re_t", "im_t"])?;
        for (i, v) in self.values.iter().enumerate() {
            let xi = self.grid.xi(i);
            w.write_record([xi[0], xi[1], xi[2], v.re, v.im].map(|x| format!("{x:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scattering data on `grid`, zero for `|xi| >= T_xi`, near-singular nodes
/// and nodes where `|Re t|` or `|Im t|` exceeds `cap`. The `xi = 0` node is the
/// mean of its six axis neighbors.
pub fn scattering(op: &ScatteringOperator, grid: &XiGrid, method: TMethod, cap: f64) -> Result<ScatteringData> {
    if matches!(method, TMethod::Zero) != op.bie.is_some() {
        return Err(EitError::InvalidParameter(format!("operator not built for method {method}")));
    }
    let zero = Complex64::new(0.0, 0.0);
    let center = grid.index(grid.nodes / 2, grid.nodes / 2, grid.nodes / 2);
    let raw: Vec<(Complex64, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let xi = grid.xi(i);
            if i == center || norm3(xi) >= grid.t_xi {
                return Ok((zero, false));
            }
            match op.t_value(&minimal_zeta(xi)?) {
                Ok(t) => Ok((t, false)),
                Err(EitError::NearSingularBie(_)) => Ok((zero, true)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let singular_nodes = raw.iter().filter(|r| r.1).count();
    if singular_nodes > 0 {
        warn!("{singular_nodes} xi nodes zeroed by a near-singular boundary integral system");
    }
    let mut values: Vec<Complex64> = raw.into_iter().map(|r| r.0).collect();
    let c = grid.nodes / 2;
    let neighbors = [
        grid.index(c - 1, c, c),
        grid.index(c + 1, c, c),
        grid.index(c, c - 1, c),
        grid.index(c, c + 1, c),
        grid.index(c, c, c - 1),
        grid.index(c, c, c + 1),
    ];
    values[center] = neighbors.iter().map(|&i| values[i]).sum::<Complex64>() / 6.0;
    let mut capped_nodes = 0;
    for v in values.iter_mut() {
        if v.re.abs() > cap || v.im.abs() > cap {
            *v = zero;
            capped_nodes += 1;
        }
    }
    debug!("{capped_nodes} xi nodes removed by the amplitude cap {cap}");
    let n = grid.nodes;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let mut asym = 0.0f64;
    for i in 0..grid.len() {
        let [a, b, k] = [i % n, (i / n) % n, i / (n * n)];
        let mirror = grid.index(n - 1 - a, n - 1 - b, n - 1 - k);
        asym = asym.max((values[mirror] - values[i].conj()).norm());
    }
    Ok(ScatteringData {
        grid: grid.clone(),
        method,
        cap,
        values,
        singular_nodes,
        capped_nodes,
        conjugate_asymmetry: if scale > 0.0 { asym / scale } else { 0.0 },
    })
}

/// Schrödinger potential (per squared length unit) on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGrid {
    pub q: VoxelGrid,
    /// Largest discarded imaginary part.
    pub max_imag: f64,
}

/// `q(x) = (2 pi)^-3 int e^{i x.xi} t(xi) dxi` by a separable Simpson rule,
/// evaluated at the cell centers of an `n^3` grid over `domain`.
pub fn invert_scattering_to_q(t: &ScatteringData, domain: BoxDomain, n: usize, length_unit: f64) -> Result<PotentialGrid> {
    let probe = VoxelGrid::constant(domain, [n; 3], 0.0)?;
    let m = t.grid.nodes;
    let xi = t.grid.axis();
    let w = simpson_weights(-t.grid.t_xi, t.grid.t_xi, m);
    // kernels[axis][(ix, node)] = w_node e^{i x xi_node}
    let kernels: Vec<DMatrix<Complex64>> = (0..3)
        .map(|a| {
            let xs = probe.axis_centers(a);
            DMatrix::from_fn(n, m, |r, c| Complex64::from_polar(w[c], xs[r] / length_unit * xi[c]))
        })
        .collect();
    // Contract the x axis, then y, then z.
    let mut s1 = vec![Complex64::new(0.0, 0.0); n * m * m];
    for k in 0..m {
        for j in 0..m {
            for ix in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    acc += kernels[0][(ix, i)] * t.values[t.grid.index(i, j, k)];
                }
                s1[ix + n * (j + m * k)] = acc;
            }
        }
    }
    let mut s2 = vec![Complex64::new(0.0, 0.0); n * n * m];
    for k in 0..m {
        for iy in 0..n {
            for ix in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..m {
                    acc += kernels[1][(iy, j)] * s1[ix + n * (j + m * k)];
                }
                s2[ix + n * (iy + n * k)] = acc;
            }
        }
    }
    let norm = (2.0 * PI).powi(-3);
    let mut values = vec![0.0; n * n * n];
    let mut max_imag = 0.0f64;
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..m {
                    acc += kernels[2][(iz, k)] * s2[ix + n * (iy + n * k)];
                }
                acc *= norm;
                max_imag = max_imag.max(acc.im.abs());
                values[ix + n * (iy + n * iz)] = acc.re;
            }
        }
    }
    Ok(PotentialGrid { q: VoxelGrid::new(domain, [n; 3], values)?, max_imag })
}

/// Nodal solution of `(-Laplace + q) u = 0`, `u = 1` on the boundary.
///
/// Solved for `v = u - 1`, which vanishes on the boundary and satisfies
/// `(-Laplace + q) v = -q`.
pub fn solve_schrodinger(q: &PotentialGrid, mesh: &TetMesh, length_unit: f64) -> Result<Vec<f64>> {
    const A: f64 = 0.585_410_196_624_968_5;
    const B: f64 = 0.138_196_601_125_010_5;
    let bary = [[A, B, B, B], [B, A, B, B], [B, B, A, B], [B, B, B, A]];
    let n = mesh.node_count();
    let boundary = mesh.boundary_nodes();
    let mut interior = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        if !boundary[i] {
            interior[i] = count;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(vec![1.0; n]);
    }
    let scale = 1.0 / (length_unit * length_unit);
    let elements = element_geometry(mesh);
    let mut mat = TripletBuilder::with_capacity(count, 16 * mesh.tets.len());
    let mut rhs = DMatrix::zeros(count, 1);
    for (t, tet) in mesh.tets.iter().enumerate() {
        let g = &elements[t];
        let p = mesh.tet_points(t);
        let qv: [f64; 4] = bary.map(|b| {
            let x = [0, 1, 2].map(|a| b[0] * p[0][a] + b[1] * p[1][a] + b[2] * p[2][a] + b[3] * p[3][a]);
            q.q.sample(x) * scale
        });
        for i in 0..4 {
            for j in 0..4 {
                let stiff = g.volume * (g.grads[i][0] * g.grads[j][0] + g.grads[i][1] * g.grads[j][1] + g.grads[i][2] * g.grads[j][2]);
                let mass: f64 = (0..4).map(|k| qv[k] * bary[k][i] * bary[k][j]).sum::<f64>() * g.volume / 4.0;
                let (ni, nj) = (tet[i], tet[j]);
                if boundary[ni] {
                    continue;
                }
                rhs[(interior[ni], 0)] -= mass;
                if !boundary[nj] {
                    mat.add(interior[ni], interior[nj], stiff + mass);
                }
            }
        }
    }
    let stats = || {
        let (lo, hi) = (q.q.min(), q.q.max());
        format!("q range [{lo:.3e}, {hi:.3e}] per squared length unit")
    };
    let lu = mat.lu().map_err(|e| EitError::IndefiniteSystem(format!("{e}; {}", stats())))?;
    let x = lu.solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EitError::IndefiniteSystem(format!("non-finite solution; {}", stats())));
    }
    Ok((0..n).map(|i| if boundary[i] { 1.0 } else { 1.0 + x[(interior[i], 0)] }).collect())
}

/// Conductivity `sigma_best * u^2` sampled on an `output^3` voxel grid.
pub fn reconstruct_from_q(
    q: &PotentialGrid,
    mesh: &TetMesh,
    sigma_best: f64,
    output: usize,
    length_unit: f64,
) -> Result<(VoxelGrid, Vec<f64>)> {
    let u = solve_schrodinger(q, mesh, length_unit)?;
    let image = VoxelGrid::from_fn(mesh.domain, [output; 3], |p| {
        let v = mesh.interpolate(&u, p);
        sigma_best * v * v
    })?;
    Ok((image, u))
}

/// Output of [`tmethod_from_dn`].
#[derive(Debug, Clone)]
pub struct TImage {
    /// Conductivity (absolute) or change from `sigma_best` (difference).
    pub image: VoxelGrid,
    pub potential: PotentialGrid,
    pub scattering: ScatteringData,
    pub bie_condition: Option<f64>,
}

/// Full pipeline from DN matrices (A/V).
///
/// Both maps are divided by `sigma_best` before use. In absolute mode
/// `l_ref` is the map of the unit-conductivity model; in difference mode it
/// is the measured reference and the returned image is `sigma - sigma_best`.
#[allow(clippy::too_many_arguments)]
pub fn tmethod_from_dn(
    l_sigma: &DnMatrix,
    l_ref: &DnMatrix,
    basis: &CurrentPatternBasis,
    centers: &[[f64; 3]],
    domain: BoxDomain,
    mesh: Option<&TetMesh>,
    params: &TParams,
    method: TMethod,
    mode: Mode,
    sigma_best: f64,
) -> Result<TImage> {
    if !(sigma_best > 0.0) {
        return Err(EitError::DegenerateData(format!("best-fit conductivity {sigma_best} is not positive")));
    }
    let ls = l_sigma.scaled(1.0 / sigma_best);
    let lr = match mode {
        Mode::Absolute => l_ref.clone(),
        Mode::Difference => l_ref.scaled(1.0 / sigma_best),
    };
    let op = ScatteringOperator::new(&ls, &lr, basis, centers, params.length_unit, method)?;
    let grid = XiGrid::new(params.t_xi, params.xi_nodes)?;
    let scattering = scattering(&op, &grid, method, params.cap)?;
    let potential = invert_scattering_to_q(&scattering, domain, params.q_grid, params.length_unit)?;
    let owned;
    let mesh = match mesh {
        Some(m) => m,
        None => {
            owned = mesh_box_uniform(domain, params.schrodinger_elements)?;
            &owned
        }
    };
    let (mut image, _) = reconstruct_from_q(&potential, mesh, sigma_best, params.output_grid, params.length_unit)?;
    if mode == Mode::Difference {
        for v in image.values.iter_mut() {
            *v -= sigma_best;
        }
    }
    Ok(TImage { image, potential, scattering, bie_condition: op.bie_condition() })
}
