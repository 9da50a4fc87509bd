//! Current-pattern bases, discrete ND/DN matrices, best-fit constant
//! conductivity and the measured-frame file format.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::forward::PatternSet;

/// Orthonormal current patterns spanning a subspace of mean-free vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentPatternBasis {
    q: DMatrix<f64>,
}

impl CurrentPatternBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn electrode_count(&self) -> usize {
        self.q.nrows()
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    /// Coordinates of `v` (length L) in the basis: `Q^T v`.
    pub fn project(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.q.transpose() * v
    }
}

/// Flips `col` so that its first entry of non-negligible magnitude is positive.
fn fix_sign(col: &mut nalgebra::DVectorViewMut<'_, f64>) {
    let scale = col.amax();
    if let Some(first) = col.iter().find(|v| v.abs() > 1e-10 * scale).copied() {
        if first < 0.0 {
            col.neg_mut();
        }
    }
}

fn check_mean_free(currents: &DMatrix<f64>, tol: f64) -> Result<()> {
    for (k, col) in currents.column_iter().enumerate() {
        let norm = col.norm();
        let s = col.sum();
        if norm == 0.0 || s.abs() > tol * norm {
            return Err(EitError::NonMeanFreeCurrents {
                column: k,
                relative_sum: if norm == 0.0 { f64::INFINITY } else { s / norm },
            });
        }
    }
    Ok(())
}

/// Orthonormalizes mean-free current patterns (Householder QR), keeping
/// column order and making the leading entry of each column positive.
pub fn build_basis(currents: &DMatrix<f64>) -> Result<CurrentPatternBasis> {
    let (l, k) = currents.shape();
    if k == 0 || k >= l {
        return Err(EitError::RankDeficient(format!("{k} patterns for {l} electrodes (need 1..=L-1)")));
    }
    check_mean_free(currents, 1e-6)?;
    let qr = currents.clone().qr();
    let r = qr.r();
    let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..k {
        if r[(i, i)].abs() <= 1e-10 * rmax {
            return Err(EitError::RankDeficient(format!("numerical rank below {k} (pattern {i})")));
        }
    }
    let mut q = qr.q();
    // Remove the round-off component along the constant vector.
    for mut col in q.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let n = col.norm();
        col /= n;
    }
    for mut col in q.column_iter_mut() {
        fix_sign(&mut col);
    }
    Ok(CurrentPatternBasis { q })
}

/// `L x (L-1)` orthonormal basis of the mean-free vectors (normalized Helmert contrasts).
pub fn mean_free_basis(l: usize) -> CurrentPatternBasis {
    let mut q = DMatrix::zeros(l, l - 1);
    for j in 0..l - 1 {
        let m = (j + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        for i in 0..=j {
            q[(i, j)] = 1.0 / norm;
        }
        q[(j + 1, j)] = -m / norm;
    }
    CurrentPatternBasis { q }
}

/// Discrete Neumann-to-Dirichlet matrix (V/A) acting on mean-free currents.
#[derive(Debug, Clone, PartialEq)]
pub struct NdMatrix {
    pub r: DMatrix<f64>,
    /// `||R - R^T||_F / ||R||_F` before symmetrization.
    pub asymmetry: f64,
}

/// Discrete Dirichlet-to-Neumann matrix (A/V), the pseudo-inverse of an
/// [`NdMatrix`] on the mean-free subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct DnMatrix {
    pub l: DMatrix<f64>,
}

impl DnMatrix {
    /// Matrix in basis coordinates, `Q^T L Q`.
    pub fn in_basis(&self, basis: &CurrentPatternBasis) -> DMatrix<f64> {
        basis.q.transpose() * &self.l * &basis.q
    }

    pub fn scaled(&self, c: f64) -> DnMatrix {
        DnMatrix { l: &self.l * c }
    }
}

fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let lmax = eig.eigenvalues.amax();
    let mut inv = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > 1e-12 * lmax {
            let v = eig.eigenvectors.column(i);
            inv += (v * v.transpose()) / lam;
        }
    }
    inv
}

/// Fits `R` with `R I^(k) = V^(k)` on `span(Q)` in the least-squares sense,
/// symmetrizes it, and returns it together with its pseudo-inverse.
pub fn assemble_nd_dn(patterns: &PatternSet, basis: &CurrentPatternBasis) -> Result<(NdMatrix, DnMatrix)> {
    let l = basis.electrode_count();
    if patterns.electrode_count() != l {
        return Err(EitError::ShapeMismatch(format!(
            "patterns have {} electrodes, basis {l}",
            patterns.electrode_count()
        )));
    }
    let n = basis.dim();
    let k = patterns.pattern_count();
    if k < n {
        return Err(EitError::RankDeficient(format!("{k} patterns cannot determine a {n}-dimensional map")));
    }
    let c = basis.project(&patterns.currents);
    let y = basis.project(&patterns.voltages);
    let cct = &c * c.transpose();
    let chol = cct
        .clone()
        .cholesky()
        .ok_or_else(|| EitError::RankDeficient("currents do not span the basis".into()))?;
    // R_Q = Y C^T (C C^T)^{-1}; solve the transposed system.
    let rq_t = chol.solve(&(&c * y.transpose()));
    let rq = rq_t.transpose();
    let norm = rq.norm();
    let asymmetry = if norm > 0.0 { (&rq - rq.transpose()).norm() / norm } else { 0.0 };
    let rq_sym = (&rq + rq.transpose()) * 0.5;
    let lq = pseudo_inverse_sym(&rq_sym);
    let r = &basis.q * &rq_sym * basis.q.transpose();
    let dn = &basis.q * lq * basis.q.transpose();
    Ok((NdMatrix { r, asymmetry }, DnMatrix { l: dn }))
}

/// Best-fit constant conductivity `sum U.U / sum U.V`, where `U` are
/// voltages simulated at 1 S/m and `V` the measured voltages.
pub fn sigma_best(simulated: &DMatrix<f64>, measured: &DMatrix<f64>) -> Result<f64> {
    if simulated.shape() != measured.shape() {
        return Err(EitError::ShapeMismatch(format!(
            "simulated {:?} vs measured {:?}",
            simulated.shape(),
            measured.shape()
        )));
    }
    let num = simulated.dot(simulated);
    let den = simulated.dot(measured);
    if den == 0.0 || !den.is_finite() {
        return Err(EitError::DegenerateData("simulated and measured voltages are orthogonal".into()));
    }
    let s = num / den;
    if s <= 0.0 {
        warn!("negative best-fit conductivity {s}: data anti-correlated with the simulation");
    }
    Ok(s)
}

/// Eigenvectors of a (homogeneous) ND matrix on the mean-free subspace,
/// ordered by decreasing eigenvalue and scaled to `amplitude` peak current.
pub fn eigen_current_patterns(nd: &NdMatrix, count: usize, amplitude: f64) -> Result<DMatrix<f64>> {
    let l = nd.r.nrows();
    if count == 0 || count > l - 1 {
        return Err(EitError::InvalidParameter(format!("pattern count {count} outside 1..={}", l - 1)));
    }
    let basis = mean_free_basis(l);
    let rq = basis.q.transpose() * &nd.r * &basis.q;
    let eig = SymmetricEigen::new(rq);
    let mut order: Vec<usize> = (0..l - 1).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(l, count);
    for (j, &i) in order.iter().take(count).enumerate() {
        let v = &basis.q * eig.eigenvectors.column(i);
        let mut col = out.column_mut(j);
        col.copy_from(&v);
        fix_sign(&mut col);
        let peak = col.amax();
        col *= amplitude / peak;
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(out)
}

/// Metadata stored next to the current/voltage CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetadata {
    pub frequency_hz: f64,
    #[serde(rename = "background_mS_per_m")]
    pub background_ms_per_m: f64,
    pub frame_count: usize,
}

pub const CURRENTS_FILE: &str = "currents.csv";
pub const VOLTAGES_FILE: &str = "voltages.csv";
pub const METADATA_FILE: &str = "meta.json";

fn write_matrix_csv(path: &Path, blocks: &[&DMatrix<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for m in blocks {
        for row in m.row_iter() {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| EitError::Parse(format!("{}: {s:?}: {e}", path.display()))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(EitError::ShapeMismatch(format!("{}: ragged rows", path.display())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(EitError::Parse(format!("{}: empty matrix", path.display())));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Writes a frame directory: `currents.csv` (L x K), `voltages.csv`
/// (frames stacked, `frames.len() * L` rows x K) and `meta.json`.
pub fn save_frames(
    dir: &Path,
    currents: &DMatrix<f64>,
    frames: &[DMatrix<f64>],
    frequency_hz: f64,
    background_ms_per_m: f64,
) -> Result<()> {
    if frames.is_empty() {
        return Err(EitError::ShapeMismatch("no voltage frames".into()));
    }
    for f in frames {
        if f.shape() != currents.shape() {
            return Err(EitError::ShapeMismatch(format!("frame {:?} vs currents {:?}", f.shape(), currents.shape())));
        }
    }
    fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join(CURRENTS_FILE), &[currents])?;
    let refs: Vec<&DMatrix<f64>> = frames.iter().collect();
    write_matrix_csv(&dir.join(VOLTAGES_FILE), &refs)?;
    let meta = FrameMetadata { frequency_hz, background_ms_per_m, frame_count: frames.len() };
    fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a frame directory, validates it and averages repeated frames.
pub fn load_frames(dir: &Path) -> Result<(PatternSet, FrameMetadata)> {
    let meta: FrameMetadata = serde_json::from_str(&fs::read_to_string(dir.join(METADATA_FILE))?)?;
    let currents = read_matrix_csv(&dir.join(CURRENTS_FILE))?;
    let stacked = read_matrix_csv(&dir.join(VOLTAGES_FILE))?;
    let (l, k) = currents.shape();
    if meta.frame_count == 0 || stacked.nrows() != l * meta.frame_count || stacked.ncols() != k {
        return Err(EitError::ShapeMismatch(format!(
            "voltages {:?} do not hold {} frames of {l} x {k}",
            stacked.shape(),
            meta.frame_count
        )));
    }
    check_mean_free(&currents, 1e-6)?;
    let voltages = if meta.frame_count == 1 {
        stacked
    } else {
        let mut avg = DMatrix::zeros(l, k);
        for f in 0..meta.frame_count {
            avg += stacked.rows(f * l, l);
        }
        avg / meta.frame_count as f64
    };
    Ok((PatternSet::new(currents, voltages)?, meta))
}

/// Data-quality summary printed by `validate-frames`.
#[derive(Debug, Clone, Serialize)]
pub struct FrameDiagnostics {
    pub electrodes: usize,
    pub patterns: usize,
    pub frames: usize,
    pub max_current_column_sum: f64,
    pub max_voltage_column_sum: f64,
    pub basis_rank: usize,
    pub nd_asymmetry: f64,
    pub nd_min_eigenvalue: f64,
}

pub fn diagnose(patterns: &PatternSet, meta: &FrameMetadata) -> Result<FrameDiagnostics> {
    let rel_sum = |m: &DMatrix<f64>| {
        m.column_iter()
            .map(|c| {
                let n = c.norm();
                if n > 0.0 {
                    c.sum().abs() / n
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    };
    let basis = build_basis(&patterns.currents)?;
    let (nd, _) = assemble_nd_dn(patterns, &basis)?;
    let rq = basis.q.transpose() * &nd.r * &basis.q;
    let min_eig = SymmetricEigen::new(rq).eigenvalues.min();
    Ok(FrameDiagnostics {
        electrodes: patterns.electrode_count(),
        patterns: patterns.pattern_count(),
        frames: meta.frame_count,
        max_current_column_sum: rel_sum(&patterns.currents),
        max_voltage_column_sum: rel_sum(&patterns.voltages),
        basis_rank: basis.dim(),
        nd_asymmetry: nd.asymmetry,
        nd_min_eigenvalue: min_eig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn projector(q: &DMatrix<f64>) -> DMatrix<f64> {
        q * q.transpose()
    }

    #[test]
    fn basis_of_coordinate_differences() {
        let raw = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 1.0, 0.0, -1.0]);
        let b = build_basis(&raw).unwrap();
        let q = b.matrix();
        assert!((q.transpose() * q - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(q.row_sum().amax() < 1e-12);
        // same span: projector equals the mean-free projector for L = 3
        let p = DMatrix::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert!((projector(q) - p).amax() < 1e-12);
        for col in q.column_iter() {
            assert!(col[0] > 0.0);
        }
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        let raw = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 1.0, -1.0, 1.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(build_basis(&raw), Err(EitError::RankDeficient(_))));
    }

    #[test]
    fn helmert_basis_is_orthonormal_and_mean_free() {
        let b = mean_free_basis(7);
        let q = b.matrix();
        assert!((q.transpose() * q - DMatrix::identity(6, 6)).amax() < 1e-14);
        assert!(q.row_sum().amax() < 1e-14);
    }

    #[test]
    fn scalar_map() {
        let l = 5;
        let basis = mean_free_basis(l);
        let i = basis.matrix().clone() * 2.0;
        let c = 3.5;
        let p = PatternSet::new(i.clone(), &i * c).unwrap();
        let (nd, dn) = assemble_nd_dn(&p, &basis).unwrap();
        let proj = DMatrix::identity(l, l) - DMatrix::from_element(l, l, 1.0 / l as f64);
        assert!((&nd.r - &proj * c).amax() < 1e-12);
        assert!((&dn.l - &proj / c).amax() < 1e-12);
        assert!((&dn.l * &nd.r - &proj).amax() < 1e-8);
        assert!((&nd.r * DMatrix::from_element(l, 1, 1.0)).amax() < 1e-14);
    }

    #[test]
    fn too_few_patterns() {
        let basis = mean_free_basis(4);
        let i = basis.matrix().columns(0, 2).into_owned();
        let p = PatternSet::new(i.clone(), i).unwrap();
        assert!(matches!(assemble_nd_dn(&p, &basis), Err(EitError::RankDeficient(_))));
    }

    #[test]
    fn sigma_best_cases() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, -2.0]);
        assert_eq!(sigma_best(&u, &u).unwrap(), 1.0);
        let v = &u / 0.024;
        assert!((sigma_best(&u, &v).unwrap() - 0.024).abs() < 1e-15);
        assert_eq!(sigma_best(&u, &(-&u)).unwrap(), -1.0);
        assert!(matches!(
            sigma_best(&u, &DMatrix::zeros(2, 2)),
            Err(EitError::DegenerateData(_))
        ));
    }

    #[test]
    fn frames_round_trip_and_average() {
        let dir = tempfile::tempdir().unwrap();
        let basis = mean_free_basis(4);
        let i = basis.matrix().clone() * 1e-4;
        let v = DMatrix::from_fn(4, 3, |r, c| ((r * 7 + c * 3) as f64).sin() * 1.234567890123e-3);
        save_frames(dir.path(), &i, std::slice::from_ref(&v), 1e4, 24.0).unwrap();
        let (p, meta) = load_frames(dir.path()).unwrap();
        assert_eq!(p.currents, i);
        assert_eq!(p.voltages, v);
        assert_eq!(meta.frame_count, 1);

        let frames = vec![v.clone(); 100];
        save_frames(dir.path(), &i, &frames, 1e4, 24.0).unwrap();
        let (p, meta) = load_frames(dir.path()).unwrap();
        assert_eq!(meta.frame_count, 100);
        assert!((&p.voltages - &v).amax() <= 1e-14 * v.amax());
    }

    #[test]
    fn rejects_non_mean_free_frames() {
        let dir = tempfile::tempdir().unwrap();
        let mut i = mean_free_basis(4).matrix().clone();
        let n = i.column(0).norm();
        i[(0, 0)] += 0.01 * n;
        let v = DMatrix::zeros(4, 3);
        save_frames(dir.path(), &i, &[v], 1e4, 24.0).unwrap();
        assert!(matches!(load_frames(dir.path()), Err(EitError::NonMeanFreeCurrents { .. })));
    }
}
