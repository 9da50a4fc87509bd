//! Box domains and electrode layouts.
//!
//! All coordinates are SI (meters) with the box centered at the origin, so the
//! interior is `[-lx/2, lx/2] x [-ly/2, ly/2] x [-lz/2, lz/2]`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};

/// Contact impedance used when none is given (Ohm m^2).
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 1e-5;

/// Interior dimensions of a rectangular tank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl BoxDomain {
    pub fn new(lx: f64, ly: f64, lz: f64) -> Result<Self> {
        if !(lx > 0.0 && ly > 0.0 && lz > 0.0) || !(lx.is_finite() && ly.is_finite() && lz.is_finite()) {
            return Err(EitError::InvalidParameter(format!(
                "box edges must be positive, got {lx} x {ly} x {lz}"
            )));
        }
        Ok(Self { lx, ly, lz })
    }

    /// The 17.0 x 25.5 x 17.0 cm experimental tank.
    pub fn tank() -> Self {
        Self { lx: 0.17, ly: 0.255, lz: 0.17 }
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.lx, self.ly, self.lz]
    }

    pub fn half(&self) -> [f64; 3] {
        [0.5 * self.lx, 0.5 * self.ly, 0.5 * self.lz]
    }

    pub fn volume(&self) -> f64 {
        self.lx * self.ly * self.lz
    }

    pub fn surface_area(&self) -> f64 {
        2.0 * (self.lx * self.ly + self.ly * self.lz + self.lx * self.lz)
    }

    pub fn longest_edge(&self) -> f64 {
        self.lx.max(self.ly).max(self.lz)
    }

    pub fn shortest_edge(&self) -> f64 {
        self.lx.min(self.ly).min(self.lz)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let h = self.half();
        (0..3).all(|a| p[a].abs() <= h[a])
    }
}

/// One of the six faces of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::XMin, Face::XMax, Face::YMin, Face::YMax, Face::ZMin, Face::ZMax];

    /// Axis normal to the face.
    pub fn normal_axis(self) -> usize {
        match self {
            Face::XMin | Face::XMax => 0,
            Face::YMin | Face::YMax => 1,
            Face::ZMin | Face::ZMax => 2,
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, Face::XMax | Face::YMax | Face::ZMax)
    }

    /// The two tangential axes in increasing order.
    pub fn tangent_axes(self) -> [usize; 2] {
        match self.normal_axis() {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    /// Coordinate of the face plane along its normal axis.
    pub fn offset(self, domain: &BoxDomain) -> f64 {
        let h = domain.half()[self.normal_axis()];
        if self.is_max() {
            h
        } else {
            -h
        }
    }

    pub fn index(self) -> usize {
        Face::ALL.iter().position(|f| *f == self).unwrap()
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Face::XMin => "x_min",
            Face::XMax => "x_max",
            Face::YMin => "y_min",
            Face::YMax => "y_max",
            Face::ZMin => "z_min",
            Face::ZMax => "z_max",
        };
        f.write_str(s)
    }
}

/// A square electrode lying flat on one face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Electrode {
    pub center: [f64; 3],
    pub side: f64,
    pub face: Face,
    pub contact_impedance: f64,
}

impl Electrode {
    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    /// True when `p` (assumed on the electrode's face) lies in the footprint.
    pub fn footprint_contains(&self, p: [f64; 3], tol: f64) -> bool {
        let h = 0.5 * self.side + tol;
        self.face
            .tangent_axes()
            .iter()
            .all(|&a| (p[a] - self.center[a]).abs() <= h)
    }

    /// Footprint interval along tangential axis `axis`.
    pub fn span(&self, axis: usize) -> (f64, f64) {
        (self.center[axis] - 0.5 * self.side, self.center[axis] + 0.5 * self.side)
    }
}

/// Electrodes attached to a box, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeLayout {
    pub domain: BoxDomain,
    pub electrodes: Vec<Electrode>,
}

impl ElectrodeLayout {
    /// Validates and wraps a list of electrodes.
    pub fn new(domain: BoxDomain, electrodes: Vec<Electrode>) -> Result<Self> {
        let layout = Self { domain, electrodes };
        layout.validate()?;
        Ok(layout)
    }

    /// Layout without electrodes, used for meshes that carry no CEM boundary.
    pub fn empty(domain: BoxDomain) -> Self {
        Self { domain, electrodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.electrodes.iter().map(|e| e.center).collect()
    }

    /// Quadrature weight of one extended electrode, `|dOmega| / L`.
    pub fn extended_weight(&self) -> f64 {
        self.domain.surface_area() / self.len() as f64
    }

    fn validate(&self) -> Result<()> {
        if self.electrodes.len() < 2 {
            return Err(EitError::InvalidLayout(format!(
                "need at least 2 electrodes, got {}",
                self.electrodes.len()
            )));
        }
        let tol = 1e-12 * self.domain.longest_edge();
        let half = self.domain.half();
        for (i, e) in self.electrodes.iter().enumerate() {
            if !(e.contact_impedance > 0.0) {
                return Err(EitError::InvalidLayout(format!("electrode {i}: contact impedance must be positive")));
            }
            if !(e.side > 0.0) {
                return Err(EitError::InvalidLayout(format!("electrode {i}: side must be positive")));
            }
            let n = e.face.normal_axis();
            if (e.center[n] - e.face.offset(&self.domain)).abs() > tol {
                return Err(EitError::InvalidLayout(format!("electrode {i}: center is not on face {}", e.face)));
            }
            for a in e.face.tangent_axes() {
                let (lo, hi) = e.span(a);
                if lo < -half[a] - tol || hi > half[a] + tol {
                    return Err(EitError::InvalidLayout(format!("electrode {i}: footprint crosses face boundary")));
                }
            }
        }
        for i in 0..self.electrodes.len() {
            for j in (i + 1)..self.electrodes.len() {
                let (a, b) = (&self.electrodes[i], &self.electrodes[j]);
                if a.face != b.face {
                    continue;
                }
                let overlap = a.face.tangent_axes().iter().all(|&ax| {
                    let (alo, ahi) = a.span(ax);
                    let (blo, bhi) = b.span(ax);
                    alo.max(blo) < ahi.min(bhi) - tol
                });
                if overlap {
                    return Err(EitError::InvalidLayout(format!("electrodes {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Loads the `{dims_m, electrodes}` JSON format.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: LayoutDoc = serde_json::from_str(s)?;
        doc.into_layout()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LayoutDoc::from_layout(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

/// Serialized form of a layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub dims_m: [f64; 3],
    pub electrodes: Vec<ElectrodeDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeDoc {
    pub center_m: [f64; 3],
    pub side_m: f64,
    pub face: Face,
    #[serde(default = "default_z")]
    pub z_ohm_m2: f64,
}

fn default_z() -> f64 {
    DEFAULT_CONTACT_IMPEDANCE
}

impl LayoutDoc {
    pub fn from_layout(layout: &ElectrodeLayout) -> Self {
        Self {
            dims_m: layout.domain.dims(),
            electrodes: layout
                .electrodes
                .iter()
                .map(|e| ElectrodeDoc {
                    center_m: e.center,
                    side_m: e.side,
                    face: e.face,
                    z_ohm_m2: e.contact_impedance,
                })
                .collect(),
        }
    }

    pub fn into_layout(self) -> Result<ElectrodeLayout> {
        let [lx, ly, lz] = self.dims_m;
        let domain = BoxDomain::new(lx, ly, lz)?;
        let electrodes = self
            .electrodes
            .into_iter()
            .map(|e| Electrode {
                center: e.center_m,
                side: e.side_m,
                face: e.face,
                contact_impedance: e.z_ohm_m2,
            })
            .collect();
        ElectrodeLayout::new(domain, electrodes)
    }
}

/// Splits `n` electrodes into `(rows, cols)` with `cols >= rows` and the
/// factorization as square as possible.
fn grid_shape(n: usize) -> (usize, usize) {
    let mut best = (1, n);
    for r in 1..=n {
        if n.is_multiple_of(r) {
            let c = n / r;
            if r <= c {
                best = (r, c);
            }
        }
    }
    best
}

/// Evenly spaced centers of `n` footprints of width `side` on `[-len/2, len/2]`.
fn axis_centers(len: f64, n: usize, side: f64) -> Option<Vec<f64>> {
    let gap = (len - n as f64 * side) / (n as f64 + 1.0);
    if gap < 0.0 {
        return None;
    }
    Some(
        (0..n)
            .map(|i| -0.5 * len + gap * (i as f64 + 1.0) + side * (i as f64 + 0.5))
            .collect(),
    )
}

/// Places electrodes on a regular grid on each face with equalized gaps.
///
/// Faces are visited in [`Face::ALL`] order; within a face electrodes are
/// ordered row-major (second tangent axis outer, first inner). On each face
/// the longer tangential direction receives the larger electrode count.
pub fn build_box_layout(
    domain: BoxDomain,
    electrodes_per_face: &BTreeMap<Face, usize>,
    side: f64,
    contact_impedance: f64,
) -> Result<ElectrodeLayout> {
    if !(side > 0.0) {
        return Err(EitError::InvalidParameter("electrode side must be positive".into()));
    }
    let dims = domain.dims();
    let mut electrodes = Vec::new();
    for face in Face::ALL {
        let count = electrodes_per_face.get(&face).copied().unwrap_or(0);
        if count == 0 {
            continue;
        }
        let [a, b] = face.tangent_axes();
        let (few, many) = grid_shape(count);
        let (na, nb) = if dims[a] >= dims[b] { (many, few) } else { (few, many) };
        let overflow = |axis: usize, n: usize| EitError::FootprintOverflow {
            face: face.to_string(),
            detail: format!("{n} x {side} m does not fit in {} m", dims[axis]),
        };
        let ca = axis_centers(dims[a], na, side).ok_or_else(|| overflow(a, na))?;
        let cb = axis_centers(dims[b], nb, side).ok_or_else(|| overflow(b, nb))?;
        for &vb in &cb {
            for &va in &ca {
                let mut center = [0.0; 3];
                center[face.normal_axis()] = face.offset(&domain);
                center[a] = va;
                center[b] = vb;
                electrodes.push(Electrode { center, side, face, contact_impedance });
            }
        }
    }
    ElectrodeLayout::new(domain, electrodes)
}

/// Per-face counts of the tank pattern: four on each end (faces normal to the
/// long axis) and six on each side.
pub fn tank_face_counts(domain: &BoxDomain) -> BTreeMap<Face, usize> {
    let dims = domain.dims();
    let long = (0..3)
        .max_by(|&i, &j| dims[i].total_cmp(&dims[j]).then(j.cmp(&i)))
        .unwrap();
    Face::ALL
        .iter()
        .map(|&f| (f, if f.normal_axis() == long { 4 } else { 6 }))
        .collect()
}

/// The 32-electrode, 8 cm square tank layout on an arbitrary box.
pub fn tank_layout(domain: BoxDomain, contact_impedance: f64) -> Result<ElectrodeLayout> {
    build_box_layout(domain, &tank_face_counts(&domain), 0.08, contact_impedance)
}
