//! End-to-end runs: data acquisition (simulated or loaded), model
//! preparation, reconstruction, evaluation and output files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calderon::{calderon_from_dn, CalderonParams, Mode};
use crate::dn::{assemble_nd_dn, build_basis, load_frames, sigma_best, CurrentPatternBasis, DnMatrix};
use crate::error::{EitError, Result};
use crate::forward::{jacobian_sigma, CemModel, ConductivityField, PatternSet};
use crate::geometry::{tank_layout, BoxDomain, ElectrodeLayout, DEFAULT_CONTACT_IMPEDANCE};
use crate::lindiff::{build_prior, LinearDifferenceSolver, NoiseModel};
use crate::mesh::{mesh_box, MeshOptions, TetMesh};
use crate::metrics::{evaluate_recon, MetricsReport, DEFAULT_THRESHOLD};
use crate::phantom::{simulate_phantom_frames, Mismodel, Scenario};
use crate::tmethods::{tmethod_from_dn, TMethod, TParams};
use crate::voxel::VoxelGrid;

/// Version of the run report layout.
pub const REPORT_SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Calderon,
    Texp,
    T0,
    Lindiff,
}

impl Method {
    pub fn supports(self, mode: Mode) -> bool {
        !(self == Method::Lindiff && mode == Mode::Absolute)
    }
}

impl FromStr for Method {
    type Err = EitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calderon" => Ok(Method::Calderon),
            "texp" => Ok(Method::Texp),
            "t0" => Ok(Method::T0),
            "lindiff" => Ok(Method::Lindiff),
            _ => Err(EitError::InvalidParameter(format!("unknown method {s:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Calderon => "calderon",
            Method::Texp => "texp",
            Method::T0 => "t0",
            Method::Lindiff => "lindiff",
        })
    }
}

/// Prior and noise settings of the linear difference method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LindiffParams {
    /// Prior standard deviation as a multiple of the best-fit conductivity.
    pub std_mult: f64,
    /// Correlation distance as a fraction of the longest box edge.
    pub corr_frac: f64,
    /// Covariance at the correlation distance, percent of the variance.
    pub cov_pct: f64,
    /// Noise level used when the data carry no SNR (dB).
    pub snr_db: f64,
    /// Spacing of the (coarse) mesh carrying the nodal unknowns (m).
    pub mesh_h_m: f64,
    pub output_grid: usize,
}

impl Default for LindiffParams {
    fn default() -> Self {
        Self { std_mult: 16.0, corr_frac: 0.125, cov_pct: 1.0, snr_db: 96.0, mesh_h_m: 0.015, output_grid: 64 }
    }
}

/// Resolution of the reconstruction forward mesh (never jittered).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMeshSpec {
    pub h_far_m: f64,
    pub h_electrode_m: f64,
}

impl Default for ReconMeshSpec {
    fn default() -> Self {
        Self { h_far_m: 0.02, h_electrode_m: 0.0022 }
    }
}

/// Where the measurements come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Scenario JSON file, simulated on the fly.
    Scenario(PathBuf),
    /// Frame directories of target and reference measurements on the tank
    /// with the given dimensions.
    Frames { data: PathBuf, reference: PathBuf, dims_m: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source: DataSource,
    pub method: Method,
    pub mode: Mode,
    #[serde(default = "default_mismodel")]
    pub mismodel: Mismodel,
    #[serde(default)]
    pub calderon: CalderonParams,
    #[serde(default)]
    pub tmethod: TParams,
    #[serde(default)]
    pub lindiff: LindiffParams,
    #[serde(default)]
    pub recon_mesh: ReconMeshSpec,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Overrides the scenario's phantom centers (required for frame data metrics).
    #[serde(default)]
    pub truth_centers_m: Option<Vec<[f64; 3]>>,
    pub output_dir: PathBuf,
    /// Overrides the scenario noise seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub force: bool,
}

fn default_mismodel() -> Mismodel {
    Mismodel::Correct
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl RunConfig {
    pub fn new(source: DataSource, method: Method, mode: Mode, output_dir: PathBuf) -> Self {
        Self {
            source,
            method,
            mode,
            mismodel: Mismodel::Correct,
            calderon: CalderonParams::default(),
            tmethod: TParams::default(),
            lindiff: LindiffParams::default(),
            recon_mesh: ReconMeshSpec::default(),
            threshold: DEFAULT_THRESHOLD,
            truth_centers_m: None,
            output_dir,
            seed: None,
            force: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.method.supports(self.mode) {
            return Err(EitError::InvalidParameter(format!("method {} is difference-only", self.method)));
        }
        if !(0.5..=0.9).contains(&self.threshold) {
            return Err(EitError::InvalidParameter(format!("threshold {} outside [0.5, 0.9]", self.threshold)));
        }
        let c = &self.calderon;
        if !(c.tz1 > 0.0 && c.tz1 <= c.tz2 && c.mollifier_t > 0.0) {
            return Err(EitError::InvalidParameter("Calderon needs 0 < T_z1 <= T_z2 and t > 0".into()));
        }
        let t = &self.tmethod;
        if !(t.t_xi > 0.0 && t.cap > 0.0) {
            return Err(EitError::InvalidParameter("t-methods need T_xi > 0 and a positive cap".into()));
        }
        let l = &self.lindiff;
        if !(l.std_mult > 0.0 && l.corr_frac > 0.0 && l.cov_pct > 0.0 && l.cov_pct < 100.0 && l.mesh_h_m > 0.0) {
            return Err(EitError::InvalidParameter("lindiff needs positive std/corr and 0 < cov% < 100".into()));
        }
        Ok(())
    }

    /// Sets a named method parameter, used by sweeps.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "t_xi" => self.tmethod.t_xi = value,
            "cap" => self.tmethod.cap = value,
            "tz1" => self.calderon.tz1 = value,
            "tz2" => self.calderon.tz2 = value,
            "t" | "mollifier_t" => self.calderon.mollifier_t = value,
            "threshold" => self.threshold = value,
            "std_mult" => self.lindiff.std_mult = value,
            "corr_frac" => self.lindiff.corr_frac = value,
            "cov_pct" => self.lindiff.cov_pct = value,
            _ => return Err(EitError::InvalidParameter(format!("unknown sweep parameter {name:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Averaged target and reference measurements with the same currents.
#[derive(Debug, Clone)]
pub struct Measurements {
    pub data: PatternSet,
    pub reference: PatternSet,
    pub snr_db: Option<f64>,
    pub truth_centers: Vec<[f64; 3]>,
    pub seed: u64,
}

impl Measurements {
    pub fn simulate(scenario: &Scenario) -> Result<Self> {
        let sim = simulate_phantom_frames(scenario)?;
        Ok(Self {
            data: sim.data,
            reference: sim.reference,
            snr_db: scenario.snr_db,
            truth_centers: scenario.phantom.centers(),
            seed: scenario.seed,
        })
    }

    pub fn from_frames(data_dir: &Path, reference_dir: &Path) -> Result<Self> {
        let (data, _) = load_frames(data_dir)?;
        let (reference, _) = load_frames(reference_dir)?;
        if (&data.currents - &reference.currents).amax() > 1e-12 * data.currents.amax() {
            return Err(EitError::ShapeMismatch("data and reference use different current patterns".into()));
        }
        Ok(Self { data, reference, snr_db: None, truth_centers: Vec::new(), seed: 0 })
    }
}

/// Everything derived from the measurements and the modeled geometry that
/// the reconstruction methods share.
pub struct PreparedModel {
    pub layout: ElectrodeLayout,
    pub mesh: TetMesh,
    pub basis: CurrentPatternBasis,
    /// Voltages of the unit-conductivity model for the measured currents.
    pub unit_voltages: DMatrix<f64>,
    pub l_unit: DnMatrix,
    pub l_data: DnMatrix,
    pub l_reference: DnMatrix,
    /// Best fit to the target data.
    pub sigma_best: f64,
    /// Best fit to the reference data.
    pub sigma_best_reference: f64,
}

impl PreparedModel {
    pub fn new(layout: ElectrodeLayout, meas: &Measurements, spec: ReconMeshSpec) -> Result<Self> {
        if layout.len() != meas.data.electrode_count() {
            return Err(EitError::ShapeMismatch(format!(
                "{} modeled electrodes, {} measured",
                layout.len(),
                meas.data.electrode_count()
            )));
        }
        let mesh = mesh_box(&layout, MeshOptions::new(spec.h_far_m, spec.h_electrode_m))?;
        let unit = {
            let model = CemModel::new(&mesh, &layout)?;
            let sigma = ConductivityField::constant(mesh.node_count(), 1.0)?;
            let fields = model.factorize(&sigma)?.solve(&meas.data.currents)?;
            fields.voltages
        };
        let basis = build_basis(&meas.data.currents)?;
        let (_, l_unit) = assemble_nd_dn(&PatternSet::new(meas.data.currents.clone(), unit.clone())?, &basis)?;
        let (_, l_data) = assemble_nd_dn(&meas.data, &basis)?;
        let (_, l_reference) = assemble_nd_dn(&meas.reference, &basis)?;
        let sigma_best_data = sigma_best(&unit, &meas.data.voltages)?;
        let sigma_best_reference = sigma_best(&unit, &meas.reference.voltages)?;
        Ok(Self {
            layout,
            mesh,
            basis,
            unit_voltages: unit,
            l_unit,
            l_data,
            l_reference,
            sigma_best: sigma_best_data,
            sigma_best_reference,
        })
    }

    pub fn domain(&self) -> BoxDomain {
        self.layout.domain
    }
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
}

impl StageTimings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| label(stage, e))?;
        let secs = start.elapsed().as_secs_f64();
        info!("{stage}: {secs:.2} s");
        self.stages.push((stage.to_string(), secs));
        Ok(out)
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }
}

/// Prefixes the stage name onto message-carrying errors.
fn label(stage: &str, e: EitError) -> EitError {
    match e {
        EitError::InvalidParameter(m) => EitError::InvalidParameter(format!("[{stage}] {m}")),
        EitError::DegenerateData(m) => EitError::DegenerateData(format!("[{stage}] {m}")),
        EitError::IndefiniteSystem(m) => EitError::IndefiniteSystem(format!("[{stage}] {m}")),
        EitError::FactorizationFailure(m) => EitError::FactorizationFailure(format!("[{stage}] {m}")),
        EitError::SingularSystem(m) => EitError::SingularSystem(format!("[{stage}] {m}")),
        EitError::ShapeMismatch(m) => EitError::ShapeMismatch(format!("[{stage}] {m}")),
        EitError::Parse(m) => EitError::Parse(format!("[{stage}] {m}")),
        other => other,
    }
}

/// Reconstructs with one method from a prepared model.
pub fn reconstruct_prepared(
    prep: &PreparedModel,
    meas: &Measurements,
    method: Method,
    mode: Mode,
    cfg: &RunConfig,
) -> Result<VoxelGrid> {
    if !method.supports(mode) {
        return Err(EitError::InvalidParameter(format!("method {method} is difference-only")));
    }
    let centers = prep.layout.centers();
    let domain = prep.domain();
    match method {
        Method::Calderon => {
            let l_ref = match mode {
                Mode::Absolute => prep.l_unit.scaled(prep.sigma_best),
                Mode::Difference => prep.l_reference.clone(),
            };
            let img = calderon_from_dn(
                &prep.l_data,
                &l_ref,
                &prep.basis,
                &centers,
                domain,
                &cfg.calderon,
                mode,
                prep.sigma_best,
            )?;
            Ok(img.image)
        }
        Method::Texp | Method::T0 => {
            let (l_ref, sb) = match mode {
                Mode::Absolute => (&prep.l_unit, prep.sigma_best),
                Mode::Difference => (&prep.l_reference, prep.sigma_best_reference),
            };
            let tm = if method == Method::Texp { TMethod::Exp } else { TMethod::Zero };
            let img = tmethod_from_dn(
                &prep.l_data,
                l_ref,
                &prep.basis,
                &centers,
                domain,
                None,
                &cfg.tmethod,
                tm,
                mode,
                sb,
            )?;
            Ok(img.image)
        }
        Method::Lindiff => lindiff_image(prep, meas, &cfg.lindiff),
    }
}

fn lindiff_image(prep: &PreparedModel, meas: &Measurements, p: &LindiffParams) -> Result<VoxelGrid> {
    let sigma0 = prep.sigma_best_reference;
    if !(sigma0 > 0.0) {
        return Err(EitError::DegenerateData(format!("reference best-fit conductivity {sigma0} is not positive")));
    }
    let mesh = mesh_box(&prep.layout, MeshOptions::new(p.mesh_h_m, p.mesh_h_m))?;
    let field = ConductivityField::constant(mesh.node_count(), sigma0)?;
    let jac = jacobian_sigma(&mesh, &field, &prep.layout, &meas.data.currents)?;
    let snr = meas.snr_db.unwrap_or(p.snr_db);
    let v1 = meas.reference.stacked_voltages();
    let v2 = meas.data.stacked_voltages();
    let noise = NoiseModel::from_snr(&v1, &v2, snr)?;
    let d = p.corr_frac * prep.domain().longest_edge();
    let prior = build_prior(&mesh.nodes, p.std_mult * sigma0, d, p.cov_pct / 100.0)?;
    let dv: Vec<f64> = v2.iter().zip(&v1).map(|(a, b)| a - b).collect();
    let x = LinearDifferenceSolver::new(&jac, &noise, &prior)?.solve(&dv)?;
    VoxelGrid::from_fn(prep.domain(), [p.output_grid; 3], |q| mesh.interpolate(&x, q))
}

/// Report written next to the image files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub method: Method,
    pub mode: Mode,
    pub mismodel: Mismodel,
    pub seed: u64,
    pub sigma_best: f64,
    pub recon_mesh_nodes: usize,
    pub image_min: f64,
    pub image_max: f64,
    pub metrics: Option<MetricsReport>,
    pub metrics_error: Option<String>,
    pub timings_s: StageTimings,
}

/// Output of [`run_reconstruct`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub image: VoxelGrid,
    pub report: RunReport,
}

pub const IMAGE_VTK: &str = "recon.vtk";
pub const IMAGE_CSV: &str = "recon.csv";
pub const REPORT_JSON: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Creates `dir`, refusing to overwrite existing outputs unless `force`.
pub fn prepare_output_dir(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if !force {
        if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
            return Err(EitError::InvalidParameter(format!(
                "{} exists; pass --force to overwrite",
                dir.join(f).display()
            )));
        }
    }
    Ok(())
}

fn load_inputs(cfg: &RunConfig) -> Result<(Measurements, ElectrodeLayout)> {
    match &cfg.source {
        DataSource::Scenario(path) => {
            let mut scenario = Scenario::load(path)?;
            if let Some(seed) = cfg.seed {
                scenario.seed = seed;
            }
            let scenario = scenario.with_mismodel(cfg.mismodel)?;
            let meas = Measurements::simulate(&scenario)?;
            Ok((meas, scenario.modeled_layout))
        }
        DataSource::Frames { data, reference, dims_m } => {
            let [lx, ly, lz] = *dims_m;
            let domain = cfg.mismodel.domain(BoxDomain::new(lx, ly, lz)?);
            let layout = tank_layout(domain, DEFAULT_CONTACT_IMPEDANCE)?;
            Ok((Measurements::from_frames(data, reference)?, layout))
        }
    }
}

/// Reconstruction and evaluation on already prepared inputs; nothing is written.
pub fn run_on_prepared(
    cfg: &RunConfig,
    meas: &Measurements,
    prep: &PreparedModel,
    mut timings: StageTimings,
) -> Result<RunOutput> {
    let image = timings.time("reconstruct", || reconstruct_prepared(prep, meas, cfg.method, cfg.mode, cfg))?;
    let truth = cfg.truth_centers_m.clone().unwrap_or_else(|| meas.truth_centers.clone());
    let (metrics, metrics_error) = if truth.is_empty() {
        (None, Some("no truth centers".to_string()))
    } else {
        match timings.time("evaluate", || evaluate_recon(&image, &truth, cfg.threshold)) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        method: cfg.method,
        mode: cfg.mode,
        mismodel: cfg.mismodel,
        seed: meas.seed,
        sigma_best: prep.sigma_best,
        recon_mesh_nodes: prep.mesh.node_count(),
        image_min: image.min(),
        image_max: image.max(),
        metrics,
        metrics_error,
        timings_s: timings,
    };
    Ok(RunOutput { image, report })
}

/// Loads or simulates the data, reconstructs, evaluates and writes
/// `recon.vtk`, `recon.csv`, `report.json` and `metrics.csv`.
pub fn run_reconstruct(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    prepare_output_dir(&cfg.output_dir, &[IMAGE_VTK, IMAGE_CSV, REPORT_JSON, METRICS_CSV], cfg.force)?;
    let mut timings = StageTimings::default();
    let (meas, layout) = timings.time("acquire", || load_inputs(cfg))?;
    let prep = timings.time("model", || PreparedModel::new(layout, &meas, cfg.recon_mesh))?;
    let out = run_on_prepared(cfg, &meas, &prep, timings)?;
    write_outputs(&cfg.output_dir, &out)?;
    Ok(out)
}

pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    out.image.write_vtk(&dir.join(IMAGE_VTK), "sigma")?;
    out.image.write_csv(&dir.join(IMAGE_CSV))?;
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&out.report)?)?;
    let mut w = csv::Writer::from_path(dir.join(METRICS_CSV))?;
    if let Some(m) = &out.report.metrics {
        w.write_record(MetricsReport::csv_header(m.targets.len()))?;
        w.write_record(m.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub scaled_le: Vec<f64>,
    pub max_sigma: Option<f64>,
    pub components: Option<usize>,
    pub runtime_s: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn csv_header(targets: usize) -> Vec<String> {
        let mut h = vec!["value".to_string()];
        h.extend((0..targets).map(|i| format!("scaled_le_{i}")));
        h.extend(["max_sigma", "components", "runtime_s", "error"].map(String::from));
        h
    }

    pub fn csv_record(&self, targets: usize) -> Vec<String> {
        let mut r = vec![self.value.to_string()];
        r.extend((0..targets).map(|i| self.scaled_le.get(i).map_or_else(String::new, |v| v.to_string())));
        r.push(self.max_sigma.map_or_else(String::new, |v| v.to_string()));
        r.push(self.components.map_or_else(String::new, |v| v.to_string()));
        r.push(format!("{:.3}", self.runtime_s));
        r.push(self.error.clone().unwrap_or_default());
        r
    }
}

/// One reconstruction per value on shared data; failures become rows with
/// an error label. Values run on the current rayon pool.
pub fn sweep_prepared(
    cfg: &RunConfig,
    meas: &Measurements,
    prep: &PreparedModel,
    param: &str,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    // Reject unknown names before any work.
    cfg.clone().set_param(param, 0.0)?;
    Ok(values
        .par_iter()
        .map(|&value| {
            let start = Instant::now();
            let mut c = cfg.clone();
            let result = c.set_param(param, value).and_then(|_| {
                c.validate()?;
                run_on_prepared(&c, meas, prep, StageTimings::default())
            });
            let runtime_s = start.elapsed().as_secs_f64();
            match result {
                Ok(out) => {
                    let m = out.report.metrics.as_ref();
                    SweepRow {
                        value,
                        scaled_le: m.map(|m| m.targets.iter().map(|t| t.scaled_le).collect()).unwrap_or_default(),
                        max_sigma: m.and_then(|m| m.max_target_sigma()),
                        components: m.map(|m| m.components_found),
                        runtime_s,
                        error: out.report.metrics_error,
                    }
                }
                Err(e) => SweepRow { value, scaled_le: vec![], max_sigma: None, components: None, runtime_s, error: Some(e.to_string()) },
            }
        })
        .collect())
}

/// Sweep from a config file; writes `sweep.csv` into the output directory.
pub fn run_sweep(cfg: &RunConfig, param: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    cfg.clone().set_param(param, 0.0)?;
    prepare_output_dir(&cfg.output_dir, &["sweep.csv"], cfg.force)?;
    let rows = if values.is_empty() {
        Vec::new()
    } else {
        let (meas, layout) = load_inputs(cfg)?;
        let prep = PreparedModel::new(layout, &meas, cfg.recon_mesh)?;
        sweep_prepared(cfg, &meas, &prep, param, values)?
    };
    let targets = rows.iter().map(|r| r.scaled_le.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(cfg.output_dir.join("sweep.csv"))?;
    w.write_record(SweepRow::csv_header(targets))?;
    for r in &rows {
        w.write_record(r.csv_record(targets))?;
    }
    w.flush()?;
    Ok(rows)
}
