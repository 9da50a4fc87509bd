//! Segmentation-based image metrics: localization error and target contrast.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{EitError, Result};
use crate::phantom::SCALED_LE_DIVISOR;
use crate::voxel::VoxelGrid;

/// Version written into every report; readers reject other major versions.
pub const METRICS_SCHEMA_VERSION: &str = "1.0";

/// Default segmentation threshold as a fraction of the image maximum.
pub const DEFAULT_THRESHOLD: f64 = 0.70;

fn ser_inf_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_null_as_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// One super-threshold connected component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub centroid_m: [f64; 3],
    pub voxels: usize,
    pub max_value: f64,
}

/// Metrics for one true target. Unmatched targets carry infinite errors
/// (written as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub truth_center_m: [f64; 3],
    pub component: Option<usize>,
    #[serde(serialize_with = "ser_inf_as_null", deserialize_with = "de_null_as_inf")]
    pub le_m: f64,
    #[serde(serialize_with = "ser_inf_as_null", deserialize_with = "de_null_as_inf")]
    pub scaled_le: f64,
    /// Largest image value inside the matched component.
    pub max_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: String,
    pub threshold_frac: f64,
    pub components_found: usize,
    pub components: Vec<Component>,
    pub targets: Vec<TargetMetrics>,
    pub image_max: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a report, rejecting unknown major schema versions.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let version = v.get("schema_version").and_then(|x| x.as_str()).unwrap_or("");
        let major = |s: &str| s.split('.').next().unwrap_or("").to_string();
        if major(version) != major(METRICS_SCHEMA_VERSION) {
            return Err(EitError::SchemaVersion(version.to_string()));
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn max_scaled_le(&self) -> f64 {
        self.targets.iter().map(|t| t.scaled_le).fold(0.0, f64::max)
    }

    /// Largest matched-component maximum.
    pub fn max_target_sigma(&self) -> Option<f64> {
        self.targets.iter().filter_map(|t| t.max_sigma).reduce(f64::max)
    }

    pub fn csv_header(targets: usize) -> Vec<String> {
        let mut h = vec!["threshold_frac".to_string(), "components".to_string()];
        for i in 0..targets {
            h.push(format!("scaled_le_{i}"));
            h.push(format!("max_sigma_{i}"));
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.threshold_frac.to_string(), self.components_found.to_string()];
        for t in &self.targets {
            r.push(if t.scaled_le.is_finite() { format!("{:.6}", t.scaled_le) } else { "inf".into() });
            r.push(t.max_sigma.map_or_else(String::new, |v| format!("{v:.6e}")));
        }
        r
    }
}

/// 6-connected components of `mask`, in order of their first voxel.
pub fn label_components(shape: [usize; 3], mask: &[bool]) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = shape;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(v) = queue.pop_front() {
            comp.push(v);
            let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
            let mut visit = |w: usize| {
                if mask[w] && !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            };
            if i > 0 {
                visit(v - 1);
            }
            if i + 1 < nx {
                visit(v + 1);
            }
            if j > 0 {
                visit(v - nx);
            }
            if j + 1 < ny {
                visit(v + nx);
            }
            if k > 0 {
                visit(v - nx * ny);
            }
            if k + 1 < nz {
                visit(v + nx * ny);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Segments `recon` at `threshold_frac * max`, labels 6-connected
/// components and matches them greedily to the nearest true centers.
pub fn evaluate_recon(recon: &VoxelGrid, truth_centers: &[[f64; 3]], threshold_frac: f64) -> Result<MetricsReport> {
    if !(0.5..=0.9).contains(&threshold_frac) {
        return Err(EitError::InvalidParameter(format!("threshold fraction {threshold_frac} outside [0.5, 0.9]")));
    }
    let max = recon.max();
    if !max.is_finite() {
        return Err(EitError::DegenerateData("image contains non-finite values".into()));
    }
    let level = threshold_frac * max;
    let mask: Vec<bool> = recon.values.iter().map(|&v| v >= level).collect();
    let labels = label_components(recon.shape, &mask);
    if labels.is_empty() {
        return Err(EitError::NoTargetsFound);
    }
    let components: Vec<Component> = labels
        .iter()
        .map(|voxels| {
            let mut c = [0.0; 3];
            let mut m = f64::NEG_INFINITY;
            for &v in voxels {
                let p = recon.center(v);
                for a in 0..3 {
                    c[a] += p[a];
                }
                m = m.max(recon.values[v]);
            }
            Component { centroid_m: c.map(|x| x / voxels.len() as f64), voxels: voxels.len(), max_value: m }
        })
        .collect();
    let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, &tc) in truth_centers.iter().enumerate() {
        for (c, comp) in components.iter().enumerate() {
            pairs.push((dist(tc, comp.centroid_m), t, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut targets: Vec<TargetMetrics> = truth_centers
        .iter()
        .map(|&c| TargetMetrics {
            truth_center_m: c,
            component: None,
            le_m: f64::INFINITY,
            scaled_le: f64::INFINITY,
            max_sigma: None,
        })
        .collect();
    let mut used = vec![false; components.len()];
    for (d, t, c) in pairs {
        if targets[t].component.is_some() || used[c] {
            continue;
        }
        used[c] = true;
        targets[t] = TargetMetrics {
            truth_center_m: truth_centers[t],
            component: Some(c),
            le_m: d,
            scaled_le: d / SCALED_LE_DIVISOR,
            max_sigma: Some(components[c].max_value),
        };
    }
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION.to_string(),
        threshold_frac,
        components_found: components.len(),
        components,
        targets,
        image_max: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxDomain;

    fn grid_with_blob(center_voxel: [usize; 3], half: usize) -> VoxelGrid {
        let d = BoxDomain::new(0.32, 0.32, 0.32).unwrap();
        let mut g = VoxelGrid::constant(d, [32; 3], 0.0).unwrap();
        for idx in 0..g.len() {
            let ijk = g.ijk(idx);
            if (0..3).all(|a| ijk[a] + half >= center_voxel[a] && ijk[a] <= center_voxel[a] + half) {
                g.values[idx] = 1.0;
            }
        }
        g
    }

    #[test]
    fn coincident_blob_has_zero_error() {
        let g = grid_with_blob([10, 12, 20], 2);
        let c = g.center(g.index(10, 12, 20));
        let r = evaluate_recon(&g, &[c], 0.7).unwrap();
        assert_eq!(r.components_found, 1);
        assert!(r.targets[0].le_m < 1e-15);
        assert_eq!(r.targets[0].max_sigma, Some(1.0));
    }

    #[test]
    fn displaced_blob_scaled_error() {
        let g = grid_with_blob([16, 16, 16], 1);
        let c = g.center(g.index(16, 16, 16));
        let truth = [c[0] + 0.01071, c[1], c[2]];
        let r = evaluate_recon(&g, &[truth], 0.7).unwrap();
        assert!((r.targets[0].scaled_le - 0.042).abs() < 5e-4);
    }

    #[test]
    fn constant_image_is_one_centered_component() {
        let g = VoxelGrid::constant(BoxDomain::tank(), [8; 3], 0.024).unwrap();
        let r = evaluate_recon(&g, &[[0.0; 3]], 0.7).unwrap();
        assert_eq!(r.components_found, 1);
        assert!(r.components[0].centroid_m.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn translation_invariance_and_unmatched_targets() {
        let a = grid_with_blob([10, 10, 10], 1);
        let b = grid_with_blob([13, 10, 10], 1);
        let h = a.spacing()[0];
        let t = [0.01, 0.0, 0.005];
        let ra = evaluate_recon(&a, &[t, [0.1, 0.1, 0.1]], 0.7).unwrap();
        let rb = evaluate_recon(&b, &[[t[0] + 3.0 * h, t[1], t[2]], [0.1, 0.1, 0.1]], 0.7).unwrap();
        assert!((ra.targets[0].scaled_le - rb.targets[0].scaled_le).abs() < 1e-12);
        assert!(ra.targets[1].scaled_le.is_infinite());
        let json = ra.to_json().unwrap();
        assert!(json.contains("null"));
        assert_eq!(MetricsReport::from_json(&json).unwrap().to_json().unwrap(), json);
        let bad = json.replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(MetricsReport::from_json(&bad), Err(EitError::SchemaVersion(_))));
    }

    #[test]
    fn two_blobs_are_two_components() {
        let mut g = grid_with_blob([5, 5, 5], 1);
        let other = grid_with_blob([20, 20, 20], 1);
        for (v, o) in g.values.iter_mut().zip(&other.values) {
            *v += o;
        }
        let r = evaluate_recon(&g, &[g.center(g.index(20, 20, 20)), g.center(g.index(5, 5, 5))], 0.7).unwrap();
        assert_eq!(r.components_found, 2);
        assert_eq!(r.targets[0].component, Some(1));
        assert!(r.targets.iter().all(|t| t.le_m < 1e-12));
        assert!(evaluate_recon(&g, &[[0.0; 3]], 0.95).is_err());
    }

    #[test]
    fn sphere_centroid_converges_with_resolution() {
        let d = BoxDomain::tank();
        let c = [-0.0417, -0.0838, -0.0417];
        let sphere = |p: [f64; 3]| {
            if (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= 0.02635f64.powi(2) {
                1.0
            } else {
                0.0
            }
        };
        for n in [32, 64] {
            let g = VoxelGrid::from_fn(d, [n; 3], sphere).unwrap();
            let r = evaluate_recon(&g, &[c], 0.7).unwrap();
            let half_voxel = 0.5 * g.spacing().iter().cloned().fold(0.0, f64::max);
            assert!(r.targets[0].le_m < half_voxel, "n = {n}");
        }
    }
}
