//! Complete electrode model (CEM) forward solver with P1 elements.
//!
//! Unknowns are the nodal potentials followed by the electrode voltages of
//! electrodes `1..L`; electrode 0 is held at zero during the solve and the
//! voltages are shifted to zero mean afterwards.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{EitError, Result};
use crate::geometry::ElectrodeLayout;
use crate::mesh::{sub, TetMesh};
use crate::sparse::{SpdFactor, TripletBuilder};

/// Nodal piecewise-linear conductivity (S/m), strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField(Vec<f64>);

impl ConductivityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(EitError::InvalidParameter(format!(
                "conductivity must be positive and finite, node {i} has {}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn constant(n: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Applied currents (A) and resulting electrode voltages (V), one column per pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub currents: DMatrix<f64>,
    pub voltages: DMatrix<f64>,
}

impl PatternSet {
    pub fn new(currents: DMatrix<f64>, voltages: DMatrix<f64>) -> Result<Self> {
        if currents.shape() != voltages.shape() {
            return Err(EitError::ShapeMismatch(format!(
                "currents {:?} vs voltages {:?}",
                currents.shape(),
                voltages.shape()
            )));
        }
        Ok(Self { currents, voltages })
    }

    pub fn electrode_count(&self) -> usize {
        self.currents.nrows()
    }

    pub fn pattern_count(&self) -> usize {
        self.currents.ncols()
    }

    /// Voltages stacked pattern-major: entry `k * L + l`.
    pub fn stacked_voltages(&self) -> Vec<f64> {
        self.voltages.as_slice().to_vec()
    }
}

/// Geometry of one tetrahedron: volume and barycentric gradients.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ElementGeometry {
    pub volume: f64,
    pub grads: [[f64; 3]; 4],
}

pub(crate) fn element_geometry(mesh: &TetMesh) -> Vec<ElementGeometry> {
    (0..mesh.tets.len())
        .map(|t| {
            let p = mesh.tet_points(t);
            let e1 = sub(p[1], p[0]);
            let e2 = sub(p[2], p[0]);
            let e3 = sub(p[3], p[0]);
            let m = nalgebra::Matrix3::new(e1[0], e2[0], e3[0], e1[1], e2[1], e3[1], e1[2], e2[2], e3[2]);
            let volume = m.determinant() / 6.0;
            // rows of inv(m) are gradients of barycentrics 1..3
            let inv = m.try_inverse().expect("degenerate tetrahedron");
            let mut grads = [[0.0; 3]; 4];
            for i in 0..3 {
                for a in 0..3 {
                    grads[i + 1][a] = inv[(i, a)];
                }
            }
            for a in 0..3 {
                grads[0][a] = -(grads[1][a] + grads[2][a] + grads[3][a]);
            }
            ElementGeometry { volume, grads }
        })
        .collect()
}

/// CEM discretization of one mesh and electrode layout.
pub struct CemModel<'a> {
    mesh: &'a TetMesh,
    layout: &'a ElectrodeLayout,
    elements: Vec<ElementGeometry>,
}

/// Factorized CEM system for one conductivity.
pub struct CemSystem<'a> {
    model: &'a CemModel<'a>,
    factor: SpdFactor,
}

/// Nodal potentials and electrode voltages for a set of current patterns.
#[derive(Debug, Clone)]
pub struct CemFields {
    /// `nodes x K` potentials, shifted with the same constant as the voltages.
    pub potentials: DMatrix<f64>,
    /// `L x K` zero-mean electrode voltages.
    pub voltages: DMatrix<f64>,
}

impl<'a> CemModel<'a> {
    pub fn new(mesh: &'a TetMesh, layout: &'a ElectrodeLayout) -> Result<Self> {
        if layout.len() < 2 {
            return Err(EitError::InvalidLayout("CEM needs at least two electrodes".into()));
        }
        let areas = mesh.electrode_areas(layout.len());
        if let Some(l) = areas.iter().position(|a| *a <= 0.0) {
            return Err(EitError::MeshFailure(format!("electrode {l} has no tagged boundary triangles")));
        }
        Ok(Self { mesh, layout, elements: element_geometry(mesh) })
    }

    pub fn mesh(&self) -> &TetMesh {
        self.mesh
    }

    pub fn layout(&self) -> &ElectrodeLayout {
        self.layout
    }

    pub fn electrode_count(&self) -> usize {
        self.layout.len()
    }

    fn dim(&self) -> usize {
        self.mesh.node_count() + self.layout.len() - 1
    }

    /// Assembles the lower triangle of the grounded CEM matrix.
    fn assemble(&self, sigma: &ConductivityField) -> Result<TripletBuilder> {
        let n = self.mesh.node_count();
        if sigma.len() != n {
            return Err(EitError::ShapeMismatch(format!("conductivity has {} values for {n} nodes", sigma.len())));
        }
        let s = sigma.values();
        let mut b = TripletBuilder::with_capacity(self.dim(), self.mesh.tets.len() * 10 + self.mesh.boundary.len() * 9);
        for (tet, g) in self.mesh.tets.iter().zip(&self.elements) {
            let mean = 0.25 * tet.iter().map(|&i| s[i]).sum::<f64>();
            let w = mean * g.volume;
            for i in 0..4 {
                for j in 0..4 {
                    let (gi, gj) = (tet[i], tet[j]);
                    if gi >= gj {
                        let v = w * (g.grads[i][0] * g.grads[j][0] + g.grads[i][1] * g.grads[j][1] + g.grads[i][2] * g.grads[j][2]);
                        b.add(gi, gj, v);
                    }
                }
            }
        }
        let mut electrode_area = vec![0.0; self.layout.len()];
        for tri in &self.mesh.boundary {
            let Some(l) = tri.electrode else { continue };
            let area = self.mesh.triangle_area(tri);
            let zinv = 1.0 / self.layout.electrodes[l].contact_impedance;
            electrode_area[l] += area;
            for i in 0..3 {
                for j in 0..3 {
                    let v = zinv * area / 12.0 * if i == j { 2.0 } else { 1.0 };
                    b.add_lower(tri.nodes[i], tri.nodes[j], v);
                }
                if l > 0 {
                    b.add(n + l - 1, tri.nodes[i], -zinv * area / 3.0);
                }
            }
        }
        for l in 1..self.layout.len() {
            let zinv = 1.0 / self.layout.electrodes[l].contact_impedance;
            b.add(n + l - 1, n + l - 1, zinv * electrode_area[l]);
        }
        Ok(b)
    }

    /// Assembles and factorizes the system for `sigma`.
    pub fn factorize(&'a self, sigma: &ConductivityField) -> Result<CemSystem<'a>> {
        let b = self.assemble(sigma)?;
        let factor = b.cholesky().map_err(EitError::SingularSystem)?;
        Ok(CemSystem { model: self, factor })
    }

    /// Stacked-voltage Jacobian for a set of forward fields.
    fn jacobian_from_fields(&self, fields: &CemFields, adjoint: &CemFields) -> DMatrix<f64> {
        let n = self.mesh.node_count();
        let l_count = self.layout.len();
        let k_count = fields.potentials.ncols();
        let rows = l_count * k_count;
        // Element gradients of every forward and adjoint field.
        let grad_of = |field: &DMatrix<f64>, t: usize| -> Vec<[f64; 3]> {
            let tet = &self.mesh.tets[t];
            let g = &self.elements[t];
            (0..field.ncols())
                .map(|c| {
                    let mut v = [0.0; 3];
                    for i in 0..4 {
                        let u = field[(tet[i], c)];
                        for a in 0..3 {
                            v[a] += u * g.grads[i][a];
                        }
                    }
                    v
                })
                .collect()
        };
        // Element contributions are computed in parallel per chunk, then
        // scattered in element order so the result is deterministic.
        const CHUNK: usize = 2048;
        let mut jac = DMatrix::zeros(rows, n);
        let tet_count = self.mesh.tets.len();
        for start in (0..tet_count).step_by(CHUNK) {
            let end = (start + CHUNK).min(tet_count);
            let contributions: Vec<Vec<f64>> = (start..end)
                .into_par_iter()
                .map(|t| {
                    let gu = grad_of(&fields.potentials, t);
                    let gw = grad_of(&adjoint.potentials, t);
                    let w = -0.25 * self.elements[t].volume;
                    let mut out = vec![0.0; rows];
                    for k in 0..k_count {
                        for l in 0..l_count {
                            let (a, b) = (gu[k], gw[l]);
                            out[k * l_count + l] = w * (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]);
                        }
                    }
                    out
                })
                .collect();
            for (c, t) in contributions.iter().zip(start..end) {
                for &node in &self.mesh.tets[t] {
                    let mut col = jac.column_mut(node);
                    for r in 0..rows {
                        col[r] += c[r];
                    }
                }
            }
        }
        jac
    }
}

impl<'a> CemSystem<'a> {
    /// Solves for every column of `currents` (L x K, each column summing to zero).
    pub fn solve(&self, currents: &DMatrix<f64>) -> Result<CemFields> {
        let l_count = self.model.layout.len();
        let n = self.model.mesh.node_count();
        if currents.nrows() != l_count {
            return Err(EitError::ShapeMismatch(format!(
                "{} current rows for {l_count} electrodes",
                currents.nrows()
            )));
        }
        for (k, col) in currents.column_iter().enumerate() {
            let norm = col.norm();
            let s = col.sum();
            if norm > 0.0 && s.abs() > 1e-10 * norm {
                return Err(EitError::NonMeanFreeCurrents { column: k, relative_sum: s / norm });
            }
        }
        let k_count = currents.ncols();
        let mut rhs = DMatrix::zeros(self.factor.dim(), k_count);
        for k in 0..k_count {
            for l in 1..l_count {
                rhs[(n + l - 1, k)] = currents[(l, k)];
            }
        }
        let x = self.factor.solve(&rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EitError::SingularSystem("non-finite solution".into()));
        }
        let mut voltages = DMatrix::zeros(l_count, k_count);
        let mut potentials = DMatrix::zeros(n, k_count);
        for k in 0..k_count {
            let mut mean = 0.0;
            for l in 1..l_count {
                voltages[(l, k)] = x[(n + l - 1, k)];
                mean += voltages[(l, k)];
            }
            mean /= l_count as f64;
            for l in 0..l_count {
                voltages[(l, k)] -= mean;
            }
            for i in 0..n {
                potentials[(i, k)] = x[(i, k)] - mean;
            }
        }
        Ok(CemFields { potentials, voltages })
    }
}

/// Electrode voltages for the given conductivity and current patterns.
pub fn solve_cem_patterns(
    mesh: &TetMesh,
    sigma: &ConductivityField,
    layout: &ElectrodeLayout,
    currents: &DMatrix<f64>,
) -> Result<PatternSet> {
    let model = CemModel::new(mesh, layout)?;
    let fields = model.factorize(sigma)?.solve(currents)?;
    PatternSet::new(currents.clone(), fields.voltages)
}

/// Sensitivity of the stacked voltages (row `k * L + l`) to nodal conductivities.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub matrix: DMatrix<f64>,
}

impl JacobianMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Adjoint-field Jacobian `dV_l^k / d sigma_j = -int phi_j grad u_k . grad w_l`,
/// where `w_l` is driven by the mean-free pattern `e_l - 1/L`.
pub fn jacobian_sigma(
    mesh: &TetMesh,
    sigma0: &ConductivityField,
    layout: &ElectrodeLayout,
    currents: &DMatrix<f64>,
) -> Result<JacobianMatrix> {
    let model = CemModel::new(mesh, layout)?;
    let system = model.factorize(sigma0)?;
    let fields = system.solve(currents)?;
    let l_count = layout.len();
    let measure = DMatrix::from_fn(l_count, l_count, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / l_count as f64);
    let adjoint = system.solve(&measure)?;
    Ok(JacobianMatrix { matrix: model.jacobian_from_fields(&fields, &adjoint) })
}
