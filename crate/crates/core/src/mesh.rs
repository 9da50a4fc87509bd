//! Tetrahedral meshes of box domains.
//!
//! The mesher builds a graded tensor-product grid whose lines pass through
//! every electrode edge, then splits each hexahedron into six tetrahedra along
//! its main diagonal (Kuhn split). All hexes share one orientation, so the
//! result is conforming. The grid structure is kept for O(log n) point location.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EitError, Result};
use crate::geometry::{BoxDomain, ElectrodeLayout, Face};

/// Boundary triangle with its face and optional electrode index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryTriangle {
    pub nodes: [usize; 3],
    pub face: Face,
    pub electrode: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub domain: BoxDomain,
    pub nodes: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    pub boundary: Vec<BoundaryTriangle>,
    /// Grid line coordinates per axis.
    pub axes: [Vec<f64>; 3],
}

/// Options for [`mesh_box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshOptions {
    pub h_far: f64,
    pub h_electrode: f64,
    /// Growth factor of the spacing away from electrode edges and walls.
    pub grading: f64,
    /// Seed for perturbing interior grid lines; `None` keeps them unperturbed.
    pub jitter_seed: Option<u64>,
    pub max_elements: usize,
}

impl MeshOptions {
    pub fn new(h_far: f64, h_electrode: f64) -> Self {
        Self { h_far, h_electrode, grading: 1.3, jitter_seed: None, max_elements: 2_000_000 }
    }

    pub fn with_jitter(mut self, seed: u64) -> Self {
        self.jitter_seed = Some(seed);
        self
    }
}

// Permutations of the three axes; tet p of a hex walks 000 -> e_a -> e_a+e_b -> 111.
const KUHN: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn signed_volume(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let u = sub(b, a);
    let v = sub(c, a);
    let w = sub(d, a);
    dot(u, cross(v, w)) / 6.0
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let n = cross(sub(b, a), sub(c, a));
    0.5 * dot(n, n).sqrt()
}

/// Grid lines along one axis. Breakpoints are the walls and the electrode
/// edges; the target spacing is `h_electrode` at a breakpoint and grows
/// linearly with the distance to it (slope `grading - 1`) up to `h_far`.
fn axis_lines(
    axis: usize,
    domain: &BoxDomain,
    layout: &ElectrodeLayout,
    opts: &MeshOptions,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    let half = domain.half()[axis];
    let tol = 1e-9 * domain.longest_edge();
    let mut breaks = vec![-half, half];
    for e in &layout.electrodes {
        if e.face.normal_axis() != axis {
            let (lo, hi) = e.span(axis);
            breaks.push(lo);
            breaks.push(hi);
        }
    }
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup_by(|a, b| (*a - *b).abs() <= tol);

    let slope = opts.grading - 1.0;
    let size = |d: f64| (opts.h_electrode + slope * d).min(opts.h_far);
    let mut lines = vec![breaks[0]];
    let mut rng = rng;
    for w in breaks.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        // Cumulative element count along the interval, by the midpoint rule.
        const SAMPLES: usize = 512;
        let ds = (s1 - s0) / SAMPLES as f64;
        let mut cum = vec![0.0; SAMPLES + 1];
        for i in 0..SAMPLES {
            let s = s0 + (i as f64 + 0.5) * ds;
            cum[i + 1] = cum[i] + ds / size((s - s0).min(s1 - s));
        }
        let n = (cum[SAMPLES] - 1e-9).ceil().max(1.0) as usize;
        let mut interior = Vec::with_capacity(n.saturating_sub(1));
        for k in 1..n {
            let target = cum[SAMPLES] * k as f64 / n as f64;
            let i = cum.partition_point(|&c| c < target).clamp(1, SAMPLES);
            let frac = (target - cum[i - 1]) / (cum[i] - cum[i - 1]);
            interior.push(s0 + (i as f64 - 1.0 + frac) * ds);
        }
        if let Some(r) = rng.as_deref_mut() {
            // Lines resolving the electrode-edge layer stay put.
            let keep = 4.0 * opts.h_electrode;
            let mut prev = s0;
            for k in 0..interior.len() {
                let next = interior.get(k + 1).copied().unwrap_or(s1);
                let room = (interior[k] - prev).min(next - interior[k]);
                let shift = room * r.gen_range(-0.25..0.25);
                if (interior[k] - s0).min(s1 - interior[k]) > keep {
                    interior[k] += shift;
                }
                prev = interior[k];
            }
        }
        lines.extend(interior);
        lines.push(s1);
    }
    lines
}

/// Conforming tetrahedral mesh of the box, refined near the electrodes.
pub fn mesh_box(layout: &ElectrodeLayout, opts: MeshOptions) -> Result<TetMesh> {
    if !(opts.grading >= 1.0) {
        return Err(EitError::InvalidParameter(format!("grading {} must be at least 1", opts.grading)));
    }
    if !(opts.h_electrode > 0.0 && opts.h_electrode <= opts.h_far) {
        return Err(EitError::InvalidParameter(format!(
            "need 0 < h_electrode <= h_far, got {} and {}",
            opts.h_electrode, opts.h_far
        )));
    }
    let domain = layout.domain;
    let mut rng = opts.jitter_seed.map(ChaCha8Rng::seed_from_u64);
    let axes = [0, 1, 2].map(|a| axis_lines(a, &domain, layout, &opts, rng.as_mut()));
    let (nx, ny, nz) = (axes[0].len(), axes[1].len(), axes[2].len());
    let cells = (nx - 1) * (ny - 1) * (nz - 1);
    if cells.saturating_mul(6) > opts.max_elements {
        return Err(EitError::MeshFailure(format!(
            "{} elements exceeds cap {}",
            cells * 6,
            opts.max_elements
        )));
    }

    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut nodes = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                nodes.push([axes[0][i], axes[1][j], axes[2][k]]);
            }
        }
    }

    let mut tets = Vec::with_capacity(cells * 6);
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for perm in KUHN {
                    let mut c = [i, j, k];
                    let mut t = [idx(c[0], c[1], c[2]); 4];
                    for (s, &ax) in perm.iter().enumerate() {
                        c[ax] += 1;
                        t[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    if signed_volume(nodes[t[0]], nodes[t[1]], nodes[t[2]], nodes[t[3]]) < 0.0 {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }

    let grid_index = |n: usize| [n % nx, (n / nx) % ny, n / (nx * ny)];
    let last = [nx - 1, ny - 1, nz - 1];
    let mut boundary = Vec::new();
    for t in &tets {
        for skip in 0..4 {
            let tri: Vec<usize> = (0..4).filter(|&q| q != skip).map(|q| t[q]).collect();
            let gi: Vec<[usize; 3]> = tri.iter().map(|&n| grid_index(n)).collect();
            for axis in 0..3 {
                for (at, face) in [(0usize, false), (last[axis], true)] {
                    if gi.iter().all(|g| g[axis] == at) {
                        let face = Face::ALL[2 * axis + face as usize];
                        boundary.push(BoundaryTriangle { nodes: [tri[0], tri[1], tri[2]], face, electrode: None });
                    }
                }
            }
        }
    }
    let tol = 1e-9 * domain.longest_edge();
    for tri in &mut boundary {
        let c = centroid(&tri.nodes.map(|n| nodes[n]));
        tri.electrode = layout
            .electrodes
            .iter()
            .position(|e| e.face == tri.face && e.footprint_contains(c, tol));
    }

    Ok(TetMesh { domain, nodes, tets, boundary, axes })
}

/// Uniform mesh (no electrodes) with roughly `target_elements` tetrahedra.
pub fn mesh_box_uniform(domain: BoxDomain, target_elements: usize) -> Result<TetMesh> {
    let h = (6.0 * domain.volume() / target_elements.max(6) as f64).cbrt();
    mesh_box(&ElectrodeLayout::empty(domain), MeshOptions::new(h, h))
}

fn centroid(p: &[[f64; 3]]) -> [f64; 3] {
    let n = p.len() as f64;
    let mut c = [0.0; 3];
    for q in p {
        for a in 0..3 {
            c[a] += q[a] / n;
        }
    }
    c
}

impl TetMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn tet_points(&self, t: usize) -> [[f64; 3]; 4] {
        self.tets[t].map(|n| self.nodes[n])
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tet_points(t);
        signed_volume(a, b, c, d)
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    pub fn triangle_area(&self, tri: &BoundaryTriangle) -> f64 {
        let [a, b, c] = tri.nodes.map(|n| self.nodes[n]);
        triangle_area(a, b, c)
    }

    pub fn boundary_area(&self) -> f64 {
        self.boundary.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Tagged area per electrode.
    pub fn electrode_areas(&self, electrode_count: usize) -> Vec<f64> {
        let mut areas = vec![0.0; electrode_count];
        for tri in &self.boundary {
            if let Some(e) = tri.electrode {
                areas[e] += self.triangle_area(tri);
            }
        }
        areas
    }

    /// Nodes lying on the box boundary.
    pub fn boundary_nodes(&self) -> Vec<bool> {
        let mut on = vec![false; self.nodes.len()];
        for tri in &self.boundary {
            for &n in &tri.nodes {
                on[n] = true;
            }
        }
        on
    }

    /// Largest edge length among tetrahedra that have a node within
    /// `radius` of point `p`.
    pub fn max_edge_near(&self, p: [f64; 3], radius: f64) -> f64 {
        let mut h: f64 = 0.0;
        for t in 0..self.tets.len() {
            let pts = self.tet_points(t);
            if pts.iter().any(|q| {
                let d = sub(*q, p);
                dot(d, d).sqrt() <= radius
            }) {
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        let d = sub(pts[i], pts[j]);
                        h = h.max(dot(d, d).sqrt());
                    }
                }
            }
        }
        h
    }

    /// Finds the tetrahedron containing `p` and its barycentric coordinates.
    /// Points outside the box are clamped onto it first.
    pub fn locate(&self, p: [f64; 3]) -> (usize, [f64; 4]) {
        let mut cell = [0usize; 3];
        let mut q = p;
        for a in 0..3 {
            let ax = &self.axes[a];
            q[a] = q[a].clamp(ax[0], ax[ax.len() - 1]);
            let i = ax.partition_point(|&s| s <= q[a]);
            cell[a] = i.saturating_sub(1).min(ax.len() - 2);
        }
        let (nx, ny) = (self.axes[0].len() - 1, self.axes[1].len() - 1);
        let base = 6 * (cell[0] + nx * (cell[1] + ny * cell[2]));
        let mut best = (base, [0.25; 4], f64::NEG_INFINITY);
        for t in base..base + 6 {
            let bc = self.barycentric(t, q);
            let m = bc.iter().cloned().fold(f64::INFINITY, f64::min);
            if m > best.2 {
                best = (t, bc, m);
            }
        }
        (best.0, best.1)
    }

    pub fn barycentric(&self, t: usize, p: [f64; 3]) -> [f64; 4] {
        let [a, b, c, d] = self.tet_points(t);
        let v = signed_volume(a, b, c, d);
        let l0 = signed_volume(p, b, c, d) / v;
        let l1 = signed_volume(a, p, c, d) / v;
        let l2 = signed_volume(a, b, p, d) / v;
        [l0, l1, l2, 1.0 - l0 - l1 - l2]
    }

    /// Evaluates a nodal P1 field at `p`.
    pub fn interpolate(&self, values: &[f64], p: [f64; 3]) -> f64 {
        let (t, bc) = self.locate(p);
        self.tets[t].iter().zip(bc).map(|(&n, w)| values[n] * w).sum()
    }

    /// Writes a legacy ASCII VTK unstructured grid with optional nodal scalars.
    pub fn write_vtk(&self, path: &Path, point_data: &[(&str, &[f64])]) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# vtk DataFile Version 3.0")?;
        writeln!(out, "tetrahedral mesh")?;
        writeln!(out, "ASCII")?;
        writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(out, "POINTS {} double", self.nodes.len())?;
        for p in &self.nodes {
            writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
        }
        writeln!(out, "CELLS {} {}", self.tets.len(), self.tets.len() * 5)?;
        for t in &self.tets {
            writeln!(out, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
        }
        writeln!(out, "CELL_TYPES {}", self.tets.len())?;
        for _ in &self.tets {
            writeln!(out, "10")?;
        }
        if !point_data.is_empty() {
            writeln!(out, "POINT_DATA {}", self.nodes.len())?;
            for (name, values) in point_data {
                writeln!(out, "SCALARS {name} double 1")?;
                writeln!(out, "LOOKUP_TABLE default")?;
                for v in values.iter() {
                    writeln!(out, "{v}")?;
                }
            }
        }
        Ok(())
    }

    /// Counts how many tetrahedra share each triangular face; used by tests.
    pub fn face_multiplicity(&self) -> HashMap<[usize; 3], usize> {
        let mut m = HashMap::new();
        for t in &self.tets {
            for skip in 0..4 {
                let mut f = [0usize; 3];
                let mut c = 0;
                for q in 0..4 {
                    if q != skip {
                        f[c] = t[q];
                        c += 1;
                    }
                }
                f.sort_unstable();
                *m.entry(f).or_insert(0) += 1;
            }
        }
        m
    }
}
