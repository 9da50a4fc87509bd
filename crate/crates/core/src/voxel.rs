//! Cell-centered voxel grids over a box domain.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{EitError, Result};
use crate::geometry::BoxDomain;

/// Scalar values on an `nx x ny x nz` grid of cell centers covering a
/// centered box. Storage is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub domain: BoxDomain,
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(domain: BoxDomain, shape: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(EitError::InvalidParameter(format!("voxel shape {shape:?} has an empty axis")));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(EitError::ShapeMismatch(format!(
                "{} values for voxel shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self { domain, shape, values })
    }

    pub fn constant(domain: BoxDomain, shape: [usize; 3], value: f64) -> Result<Self> {
        Self::new(domain, shape, vec![value; shape.iter().product()])
    }

    /// Evaluates `f` at every cell center.
    pub fn from_fn<F>(domain: BoxDomain, shape: [usize; 3], f: F) -> Result<Self>
    where
        F: Fn([f64; 3]) -> f64 + Sync,
    {
        let probe = Self::constant(domain, shape, 0.0)?;
        let values = (0..probe.len()).into_par_iter().map(|i| f(probe.center(i))).collect();
        Ok(Self { values, ..probe })
    }

    pub fn cubic(domain: BoxDomain, n: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(domain, [n, n, n], values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> [f64; 3] {
        let d = self.domain.dims();
        [0, 1, 2].map(|a| d[a] / self.shape[a] as f64)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.shape[0];
        let j = (idx / self.shape[0]) % self.shape[1];
        let k = idx / (self.shape[0] * self.shape[1]);
        [i, j, k]
    }

    pub fn axis_centers(&self, axis: usize) -> Vec<f64> {
        let l = self.domain.dims()[axis];
        let n = self.shape[axis];
        (0..n).map(|i| -0.5 * l + (i as f64 + 0.5) * l / n as f64).collect()
    }

    pub fn center(&self, idx: usize) -> [f64; 3] {
        let ijk = self.ijk(idx);
        let d = self.domain.dims();
        [0, 1, 2].map(|a| -0.5 * d[a] + (ijk[a] as f64 + 0.5) * d[a] / self.shape[a] as f64)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Trilinear interpolation between cell centers; points outside the
    /// hull of the centers are clamped onto it.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let d = self.domain.dims();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.shape[a];
            if n == 1 {
                continue;
            }
            let u = ((p[a] + 0.5 * d[a]) * n as f64 / d[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut ijk = base;
            for a in 0..3 {
                let hi = corner >> a & 1 == 1;
                if self.shape[a] == 1 {
                    if hi {
                        w = 0.0;
                    }
                    continue;
                }
                if hi {
                    ijk[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[self.index(ijk[0], ijk[1], ijk[2])];
            }
        }
        acc
    }

    /// Trilinear resampling onto a grid of a different shape over the same box.
    pub fn resample(&self, shape: [usize; 3]) -> Result<Self> {
        Self::from_fn(self.domain, shape, |p| self.sample(p))
    }

    /// Legacy ASCII VTK structured points (point data at cell centers).
    pub fn write_vtk(&self, path: &Path, name: &str) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let h = self.spacing();
        let o = self.center(0);
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "voxel grid")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET STRUCTURED_POINTS")?;
        writeln!(w, "DIMENSIONS {} {} {}", self.shape[0], self.shape[1], self.shape[2])?;
        writeln!(w, "ORIGIN {:e} {:e} {:e}", o[0], o[1], o[2])?;
        writeln!(w, "SPACING {:e} {:e} {:e}", h[0], h[1], h[2])?;
        writeln!(w, "POINT_DATA {}", self.len())?;
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in &self.values {
            writeln!(w, "{v:e}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with columns `x,y,z,value` (meters, value units).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x_m", "y_m", "z_m", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            let c = self.center(i);
            w.write_record([c[0], c[1], c[2], *v].map(|x| format!("{x:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a grid written by [`VoxelGrid::write_csv`]. The box is inferred
    /// from the center spacing, so every axis needs at least two cells.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(EitError::Parse(format!("expected 4 columns, found {}", rec.len())));
            }
            let mut row = [0.0; 4];
            for (c, field) in row.iter_mut().zip(rec.iter()) {
                *c = field
                    .trim()
                    .parse()
                    .map_err(|_| EitError::Parse(format!("bad number {field:?} in {}", path.display())))?;
            }
            rows.push(row);
        }
        let axes: [Vec<f64>; 3] = [0, 1, 2].map(|a| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[a]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup_by(|x, y| (*x - *y).abs() <= 1e-9 * (1.0 + y.abs()));
            v
        });
        let shape = [0, 1, 2].map(|a| axes[a].len());
        if shape.iter().any(|&n| n < 2) {
            return Err(EitError::ShapeMismatch(format!("cannot infer a box from voxel axes of sizes {shape:?}")));
        }
        // Edges are snapped to the nanometer so a written box reads back exactly.
        let dims = [0, 1, 2].map(|a| {
            let v = &axes[a];
            let d = (v[v.len() - 1] - v[0]) * v.len() as f64 / (v.len() - 1) as f64;
            (d * 1e9).round() / 1e9
        });
        let domain = BoxDomain::new(dims[0], dims[1], dims[2])?;
        let mut grid = Self::constant(domain, shape, f64::NAN)?;
        if rows.len() != grid.len() {
            return Err(EitError::ShapeMismatch(format!("{} rows for voxel shape {shape:?}", rows.len())));
        }
        for r in &rows {
            let ijk = [0, 1, 2].map(|a| {
                let n = shape[a] as f64;
                ((r[a] + 0.5 * dims[a]) * n / dims[a] - 0.5).round().clamp(0.0, n - 1.0) as usize
            });
            let idx = grid.index(ijk[0], ijk[1], ijk[2]);
            grid.values[idx] = r[3];
        }
        if grid.values.iter().any(|v| v.is_nan()) {
            return Err(EitError::ShapeMismatch("voxel CSV does not cover a full grid".into()));
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoxDomain {
        BoxDomain::new(1.0, 2.0, 3.0).unwrap()
    }

    #[test]
    fn centers_cover_box_symmetrically() {
        let g = VoxelGrid::constant(unit(), [4, 4, 4], 0.0).unwrap();
        let c0 = g.center(0);
        let c1 = g.center(g.len() - 1);
        for a in 0..3 {
            assert!((c0[a] + c1[a]).abs() < 1e-15);
        }
        assert!((c0[0] + 0.375).abs() < 1e-15);
        assert_eq!(g.ijk(g.index(1, 2, 3)), [1, 2, 3]);
    }

    #[test]
    fn trilinear_is_exact_for_affine_fields() {
        let f = |p: [f64; 3]| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2];
        let g = VoxelGrid::from_fn(unit(), [5, 6, 7], f).unwrap();
        for p in [[0.1, 0.2, -0.3], [0.0, 0.0, 0.0], [-0.3, 0.7, 1.1]] {
            assert!((g.sample(p) - f(p)).abs() < 1e-12);
        }
        let fine = g.resample([9, 9, 9]).unwrap();
        let inner = fine.center(fine.index(4, 4, 4));
        assert!((fine.values[fine.index(4, 4, 4)] - f(inner)).abs() < 1e-12);
    }

    #[test]
    fn writes_vtk_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::constant(unit(), [2, 2, 2], 0.5).unwrap();
        g.write_vtk(&dir.path().join("g.vtk"), "sigma").unwrap();
        g.write_csv(&dir.path().join("g.csv")).unwrap();
        let vtk = std::fs::read_to_string(dir.path().join("g.vtk")).unwrap();
        assert!(vtk.contains("DIMENSIONS 2 2 2"));
        let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn csv_roundtrip_recovers_grid() {
        let dir = tempfile::tempdir().unwrap();
        let d = BoxDomain::new(0.2, 0.35, 0.25).unwrap();
        let g = VoxelGrid::from_fn(d, [4, 5, 3], |p| p[0] - 2.0 * p[1] + p[2] * p[2]).unwrap();
        let path = dir.path().join("g.csv");
        g.write_csv(&path).unwrap();
        let back = VoxelGrid::read_csv(&path).unwrap();
        assert_eq!(back.shape, g.shape);
        assert_eq!(back.values, g.values);
        assert_eq!(back.domain, d);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(VoxelGrid::new(unit(), [2, 2, 2], vec![0.0; 7]).is_err());
        assert!(VoxelGrid::new(unit(), [0, 2, 2], vec![]).is_err());
    }
}
