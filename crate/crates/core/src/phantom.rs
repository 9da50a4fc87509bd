//! Synthetic tank experiments: spherical targets in saline, domain
//! mismodeling scenarios and noisy averaged measurement frames.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dn::{assemble_nd_dn, eigen_current_patterns, mean_free_basis};
use crate::error::{EitError, Result};
use crate::forward::{CemModel, ConductivityField, PatternSet};
use crate::geometry::{
    build_box_layout, tank_layout, BoxDomain, ElectrodeDoc, ElectrodeLayout, Face, LayoutDoc, DEFAULT_CONTACT_IMPEDANCE,
};
use crate::mesh::{mesh_box, MeshOptions, TetMesh};

/// Saline conductivity of the tank experiments (S/m).
pub const TANK_BACKGROUND: f64 = 0.024;
/// Conductivity of the agar targets (S/m).
pub const TARGET_SIGMA: f64 = 0.290;
/// Radius of the spherical targets (m).
pub const TARGET_RADIUS: f64 = 0.02635;
/// Peak current of the applied eigen-patterns (A).
pub const PATTERN_AMPLITUDE: f64 = 0.25e-3;
/// Divisor of the scaled localization error: the longest true tank edge (m).
pub const SCALED_LE_DIVISOR: f64 = 0.255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center_m: [f64; 3],
    pub radius_m: f64,
    #[serde(rename = "sigma_S_per_m")]
    pub sigma: f64,
}

impl Sphere {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center_m[a]).powi(2)).sum();
        d2 <= self.radius_m * self.radius_m
    }
}

/// Piecewise-constant conductivity: spheres in a homogeneous background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    #[serde(rename = "background_S_per_m")]
    pub background: f64,
    pub spheres: Vec<Sphere>,
}

impl Phantom {
    pub fn new(background: f64, spheres: Vec<Sphere>) -> Result<Self> {
        let p = Self { background, spheres };
        p.check()?;
        Ok(p)
    }

    pub fn homogeneous(background: f64) -> Result<Self> {
        Self::new(background, Vec::new())
    }

    fn check(&self) -> Result<()> {
        if !(self.background > 0.0) || self.spheres.iter().any(|s| !(s.sigma > 0.0 && s.radius_m > 0.0)) {
            return Err(EitError::InvalidParameter("phantom conductivities and radii must be positive".into()));
        }
        Ok(())
    }

    /// Verifies that every sphere lies inside `domain`.
    pub fn check_inside(&self, domain: &BoxDomain) -> Result<()> {
        let h = domain.half();
        for (i, s) in self.spheres.iter().enumerate() {
            if (0..3).any(|a| s.center_m[a].abs() + s.radius_m > h[a]) {
                return Err(EitError::InvalidParameter(format!("sphere {i} extends outside the domain")));
            }
        }
        Ok(())
    }

    /// Conductivity at `p`; the last sphere containing `p` wins.
    pub fn conductivity_at(&self, p: [f64; 3]) -> f64 {
        self.spheres.iter().rev().find(|s| s.contains(p)).map_or(self.background, |s| s.sigma)
    }

    /// Binary nodal rasterization.
    pub fn rasterize(&self, mesh: &TetMesh) -> Result<ConductivityField> {
        ConductivityField::new(mesh.nodes.iter().map(|&p| self.conductivity_at(p)).collect())
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.spheres.iter().map(|s| s.center_m).collect()
    }
}

/// Modeled-domain choice for robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mismodel {
    Correct,
    Mid,
    Large,
}

impl Mismodel {
    /// Modeled box for a true tank; `Correct` returns `truth` unchanged.
    pub fn domain(self, truth: BoxDomain) -> BoxDomain {
        match self {
            Mismodel::Correct => truth,
            Mismodel::Mid => BoxDomain { lx: 0.18, ly: 0.27, lz: 0.19 },
            Mismodel::Large => BoxDomain { lx: 0.20, ly: 0.35, lz: 0.25 },
        }
    }
}

impl FromStr for Mismodel {
    type Err = EitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(Mismodel::Correct),
            "mid" => Ok(Mismodel::Mid),
            "large" => Ok(Mismodel::Large),
            _ => Err(EitError::InvalidParameter(format!("unknown mismodel scenario {s:?}"))),
        }
    }
}

impl fmt::Display for Mismodel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mismodel::Correct => "correct",
            Mismodel::Mid => "mid",
            Mismodel::Large => "large",
        })
    }
}

/// Mesh resolution of the data-generating forward model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataMeshSpec {
    pub h_far_m: f64,
    pub h_electrode_m: f64,
}

impl Default for DataMeshSpec {
    fn default() -> Self {
        Self { h_far_m: 0.006, h_electrode_m: 0.002 }
    }
}

/// A synthetic experiment: true and modeled geometry, phantom and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub true_layout: ElectrodeLayout,
    pub modeled_layout: ElectrodeLayout,
    pub phantom: Phantom,
    /// `None` means noiseless data.
    pub snr_db: Option<f64>,
    pub frames: usize,
    pub seed: u64,
    pub data_mesh: DataMeshSpec,
}

fn face_counts(layout: &ElectrodeLayout) -> BTreeMap<Face, usize> {
    let mut m = BTreeMap::new();
    for e in &layout.electrodes {
        *m.entry(e.face).or_insert(0) += 1;
    }
    m
}

impl Scenario {
    pub fn new(true_layout: ElectrodeLayout, phantom: Phantom, snr_db: Option<f64>, frames: usize, seed: u64) -> Result<Self> {
        phantom.check()?;
        phantom.check_inside(&true_layout.domain)?;
        if frames == 0 {
            return Err(EitError::InvalidParameter("at least one frame is required".into()));
        }
        Ok(Self {
            modeled_layout: true_layout.clone(),
            true_layout,
            phantom,
            snr_db,
            frames,
            seed,
            data_mesh: DataMeshSpec::default(),
        })
    }

    /// 17 x 25.5 x 17 cm tank, 32 electrodes, one 290 mS/m sphere in
    /// 24 mS/m saline, 96 dB SNR, 100 frames.
    pub fn standard(seed: u64) -> Result<Self> {
        let layout = tank_layout(BoxDomain::tank(), DEFAULT_CONTACT_IMPEDANCE)?;
        let phantom = Phantom::new(TANK_BACKGROUND, vec![target_sphere(standard_target_centers()[0])])?;
        Self::new(layout, phantom, Some(96.0), 100, seed)
    }

    /// Standard scenario with both lattice targets.
    pub fn two_targets(seed: u64) -> Result<Self> {
        let mut s = Self::standard(seed)?;
        s.phantom.spheres = standard_target_centers().into_iter().map(target_sphere).collect();
        s.phantom.check_inside(&s.true_layout.domain)?;
        Ok(s)
    }

    /// Same experiment without targets.
    pub fn homogeneous(&self) -> Self {
        let mut s = self.clone();
        s.phantom.spheres.clear();
        s
    }

    /// Rebuilds the modeled layout on the chosen box with the same per-face pattern.
    pub fn with_mismodel(&self, kind: Mismodel) -> Result<Self> {
        let domain = kind.domain(self.true_layout.domain);
        let mut s = self.clone();
        s.modeled_layout = if domain == self.true_layout.domain {
            self.true_layout.clone()
        } else {
            let first = &self.true_layout.electrodes[0];
            build_box_layout(domain, &face_counts(&self.true_layout), first.side, first.contact_impedance)?
        };
        Ok(s)
    }

    pub fn from_doc(doc: ScenarioDoc) -> Result<Self> {
        let [lx, ly, lz] = doc.dims_m;
        let domain = BoxDomain::new(lx, ly, lz)?;
        let true_layout = match doc.electrodes {
            Some(electrodes) => LayoutDoc { dims_m: doc.dims_m, electrodes }.into_layout()?,
            None => tank_layout(domain, DEFAULT_CONTACT_IMPEDANCE)?,
        };
        let mut s = Self::new(true_layout, doc.phantom, doc.snr_db, doc.frames, doc.seed)?;
        if let Some(m) = doc.data_mesh {
            s.data_mesh = m;
        }
        if let Some([mx, my, mz]) = doc.modeled_dims_m {
            let modeled = BoxDomain::new(mx, my, mz)?;
            if modeled != domain {
                let first = &s.true_layout.electrodes[0];
                s.modeled_layout = build_box_layout(modeled, &face_counts(&s.true_layout), first.side, first.contact_impedance)?;
            }
        }
        Ok(s)
    }

    pub fn to_doc(&self) -> ScenarioDoc {
        let layout = LayoutDoc::from_layout(&self.true_layout);
        ScenarioDoc {
            dims_m: layout.dims_m,
            electrodes: Some(layout.electrodes),
            modeled_dims_m: (self.modeled_layout.domain != self.true_layout.domain)
                .then(|| self.modeled_layout.domain.dims()),
            phantom: self.phantom.clone(),
            snr_db: self.snr_db,
            frames: self.frames,
            seed: self.seed,
            data_mesh: Some(self.data_mesh),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: ScenarioDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_doc(doc)
    }
}

/// JSON form of a [`Scenario`]: the layout document plus phantom and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub dims_m: [f64; 3],
    /// Defaults to the 32-electrode tank pattern.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electrodes: Option<Vec<ElectrodeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modeled_dims_m: Option<[f64; 3]>,
    pub phantom: Phantom,
    pub snr_db: Option<f64>,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_mesh: Option<DataMeshSpec>,
}

/// Centers of the two tank targets, each at the electrode-center lattice
/// position nearest to it in every direction.
pub fn standard_target_centers() -> [[f64; 3]; 2] {
    // 2 x 8 cm electrodes on 17 cm edges, 3 x 8 cm on the 25.5 cm edge,
    // gaps equalized: centers at +-(gap + side / 2) from the middle.
    let d = BoxDomain::tank();
    let short = d.lx / 2.0 - (d.lx - 2.0 * 0.08) / 3.0 - 0.04;
    let long = d.ly / 2.0 - (d.ly - 3.0 * 0.08) / 4.0 - 0.04;
    [[-short, -long, -short], [short, long, -short]]
}

pub fn target_sphere(center_m: [f64; 3]) -> Sphere {
    Sphere { center_m, radius_m: TARGET_RADIUS, sigma: TARGET_SIGMA }
}

/// Noisy measurement frames and their averages for data and reference tanks.
#[derive(Debug, Clone)]
pub struct SimulatedFrames {
    pub currents: DMatrix<f64>,
    pub data_frames: Vec<DMatrix<f64>>,
    pub reference_frames: Vec<DMatrix<f64>>,
    pub data: PatternSet,
    pub reference: PatternSet,
    pub data_mesh_nodes: usize,
}

fn noisy_frames(clean: &DMatrix<f64>, snr_db: Option<f64>, frames: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>> {
    let Some(snr) = snr_db else {
        return Ok(vec![clean.clone(); frames]);
    };
    let std = clean.amax() * 10f64.powf(-snr / 20.0);
    let normal = Normal::new(0.0, std).map_err(|e| EitError::InvalidParameter(e.to_string()))?;
    Ok((0..frames)
        .map(|_| {
            let mut f = clean.map(|v| v + normal.sample(rng));
            for mut col in f.column_iter_mut() {
                let m = col.mean();
                col.add_scalar_mut(-m);
            }
            f
        })
        .collect())
}

fn average(frames: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(frames[0].nrows(), frames[0].ncols());
    for f in frames {
        acc += f;
    }
    acc / frames.len() as f64
}

/// Simulates the experiment on a jittered mesh of the true tank. The
/// currents are the eigen-patterns of the homogeneous tank; noise is iid
/// Gaussian per frame at the scenario SNR and frames are averaged.
pub fn simulate_phantom_frames(scenario: &Scenario) -> Result<SimulatedFrames> {
    let layout = &scenario.true_layout;
    let opts = MeshOptions::new(scenario.data_mesh.h_far_m, scenario.data_mesh.h_electrode_m)
        .with_jitter(scenario.seed ^ 0x5eed_f00d);
    let mesh = mesh_box(layout, opts)?;
    let model = CemModel::new(&mesh, layout)?;
    let homogeneous = ConductivityField::constant(mesh.node_count(), scenario.phantom.background)?;
    let hom_system = model.factorize(&homogeneous)?;
    let basis = mean_free_basis(layout.len());
    let probe = hom_system.solve(basis.matrix())?;
    let (nd, _) = assemble_nd_dn(&PatternSet::new(basis.matrix().clone(), probe.voltages)?, &basis)?;
    let currents = eigen_current_patterns(&nd, layout.len() - 1, PATTERN_AMPLITUDE)?;
    let reference_clean = hom_system.solve(&currents)?.voltages;
    let data_clean = if scenario.phantom.spheres.is_empty() {
        reference_clean.clone()
    } else {
        let sigma = scenario.phantom.rasterize(&mesh)?;
        model.factorize(&sigma)?.solve(&currents)?.voltages
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let data_frames = noisy_frames(&data_clean, scenario.snr_db, scenario.frames, &mut rng)?;
    let reference_frames = noisy_frames(&reference_clean, scenario.snr_db, scenario.frames, &mut rng)?;
    let data = PatternSet::new(currents.clone(), average(&data_frames))?;
    let reference = PatternSet::new(currents.clone(), average(&reference_frames))?;
    Ok(SimulatedFrames { currents, data_frames, reference_frames, data, reference, data_mesh_nodes: mesh.node_count() })
}
