mod units;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgo_eit::calderon::Mode;
use cgo_eit::dn::{diagnose, load_frames, save_frames};
use cgo_eit::metrics::{evaluate_recon, DEFAULT_THRESHOLD};
use cgo_eit::phantom::{simulate_phantom_frames, Mismodel, Scenario};
use cgo_eit::pipeline::{
    prepare_output_dir, run_reconstruct, run_sweep, DataSource, Method, RunConfig, RunOutput, SweepRow,
};
use cgo_eit::voxel::VoxelGrid;
use cgo_eit::{EitError, ErrorKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

/// Absolute and difference EIT reconstructions on box-shaped tanks.
#[derive(Debug, Parser)]
#[command(name = "cgo-eit", version, about)]
struct Cli {
    /// Worker threads for parallel stages and sweeps.
    #[arg(long, global = true, env = "CGO_EIT_JOBS")]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate noisy target and reference frames from a scenario.
    Simulate(SimulateArgs),
    /// Reconstruct one image and evaluate it.
    Reconstruct(ReconArgs),
    /// Reconstruct once per value of a method parameter.
    Sweep(SweepArgs),
    /// Localization metrics of a voxel CSV against known target centers.
    Evaluate(EvaluateArgs),
    /// Print data-quality diagnostics of a frame directory.
    ValidateFrames(ValidateArgs),
    /// Convert a voxel CSV into a legacy VTK file.
    ExportVtk(ExportArgs),
    /// Linearized difference image from two frame directories.
    Lindiff(LindiffArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    TwoTargets,
    Homogeneous,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    /// Built-in scenario instead of a file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the background conductivity, e.g. 24mS/m.
    #[arg(long, value_parser = units::conductivity)]
    background: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ReconArgs {
    /// Run configuration JSON; other flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON to simulate.
    #[arg(long, conflicts_with = "frames")]
    scenario: Option<PathBuf>,
    /// Frame directory with the target present.
    #[arg(long, requires_all = ["reference", "dims"])]
    frames: Option<PathBuf>,
    /// Frame directory of the reference (homogeneous) tank.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Tank edge lengths, e.g. 17x26x18cm.
    #[arg(long, value_parser = units::triple)]
    dims: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Modeled domain: correct, mid or large.
    #[arg(long, value_parser = parse_mismodel)]
    mismodel: Option<Mismodel>,
    /// Truncation radius T_xi of the t-methods.
    #[arg(long)]
    txi: Option<f64>,
    /// Amplitude cap on Re t and Im t.
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long)]
    xi_nodes: Option<usize>,
    #[arg(long)]
    q_grid: Option<usize>,
    #[arg(long)]
    schrodinger_mesh_elems: Option<usize>,
    #[arg(long)]
    tz1: Option<f64>,
    #[arg(long)]
    tz2: Option<f64>,
    #[arg(long)]
    mollifier_t: Option<f64>,
    #[arg(long)]
    nz: Option<usize>,
    #[arg(long)]
    ntheta: Option<usize>,
    #[arg(long)]
    nphi: Option<usize>,
    /// Base x-grid of the Calderon inversion.
    #[arg(long)]
    xgrid: Option<usize>,
    /// Far-field element size of the reconstruction mesh, e.g. 2cm.
    #[arg(long, value_parser = units::length)]
    mesh_h: Option<f64>,
    /// Element size at electrode edges, e.g. 2.2mm.
    #[arg(long, value_parser = units::length)]
    mesh_h_electrode: Option<f64>,
    /// Component threshold as a fraction of the image maximum.
    #[arg(long)]
    threshold: Option<f64>,
    /// Known target centers, e.g. "0,-5.357cm,0;0,5.357cm,0".
    #[arg(long, value_parser = units::triple, value_delimiter = ';')]
    truth: Option<Vec<[f64; 3]>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    recon: ReconArgs,
    /// Parameter name: t_xi, cap, tz1, tz2, mollifier_t, threshold, std_mult, corr_frac, cov_pct.
    #[arg(long)]
    param: String,
    /// Comma-separated values; may be empty.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Voxel CSV (x_m, y_m, z_m, value).
    #[arg(long)]
    recon: PathBuf,
    #[arg(long, value_parser = units::triple, value_delimiter = ';', required = true)]
    truth: Vec<[f64; 3]>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    frames: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scalar field name in the VTK file.
    #[arg(long, default_value = "sigma")]
    name: String,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct LindiffArgs {
    /// Reference frames (before the change).
    #[arg(long)]
    frames1: PathBuf,
    /// Frames after the change.
    #[arg(long)]
    frames2: PathBuf,
    #[arg(long, value_parser = units::triple)]
    dims: [f64; 3],
    /// Prior std as a multiple of the best-fit conductivity.
    #[arg(long, default_value_t = 16.0)]
    std_mult: f64,
    /// Correlation distance as a fraction of the longest tank edge.
    #[arg(long, default_value_t = 0.125)]
    corr_frac: f64,
    /// Prior covariance (percent of the variance) at the correlation distance.
    #[arg(long, default_value_t = 1.0)]
    cov_pct: f64,
    #[arg(long, value_parser = units::triple, value_delimiter = ';')]
    truth: Option<Vec<[f64; 3]>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: EitError| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: EitError| e.to_string())
}

fn parse_mismodel(s: &str) -> Result<Mismodel, String> {
    s.parse().map_err(|e: EitError| e.to_string())
}

fn config_error(msg: impl Into<String>) -> EitError {
    EitError::InvalidParameter(msg.into())
}

fn build_config(a: &ReconArgs) -> Result<RunConfig, EitError> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let source = match (&a.scenario, &a.frames, &a.reference, a.dims) {
                (Some(s), None, _, _) => DataSource::Scenario(s.clone()),
                (None, Some(f), Some(r), Some(dims_m)) => {
                    DataSource::Frames { data: f.clone(), reference: r.clone(), dims_m }
                }
                _ => return Err(config_error("give --config, --scenario, or --frames with --reference and --dims")),
            };
            let out = a.out.clone().ok_or_else(|| config_error("--out is required"))?;
            RunConfig::new(source, a.method.unwrap_or(Method::Texp), a.mode.unwrap_or(Mode::Absolute), out)
        }
    };
    if a.config.is_some() {
        if let Some(s) = &a.scenario {
            cfg.source = DataSource::Scenario(s.clone());
        }
        if let (Some(f), Some(r), Some(dims_m)) = (&a.frames, &a.reference, a.dims) {
            cfg.source = DataSource::Frames { data: f.clone(), reference: r.clone(), dims_m };
        }
        if let Some(m) = a.method {
            cfg.method = m;
        }
        if let Some(m) = a.mode {
            cfg.mode = m;
        }
        if let Some(o) = &a.out {
            cfg.output_dir = o.clone();
        }
    }
    if let Some(m) = a.mismodel {
        cfg.mismodel = m;
    }
    let t = &mut cfg.tmethod;
    set(&mut t.t_xi, a.txi);
    set(&mut t.cap, a.cap);
    set(&mut t.xi_nodes, a.xi_nodes);
    set(&mut t.q_grid, a.q_grid);
    set(&mut t.schrodinger_elements, a.schrodinger_mesh_elems);
    let c = &mut cfg.calderon;
    set(&mut c.tz1, a.tz1);
    set(&mut c.tz2, a.tz2);
    set(&mut c.mollifier_t, a.mollifier_t);
    set(&mut c.nodes[0], a.nz);
    set(&mut c.nodes[1], a.ntheta);
    set(&mut c.nodes[2], a.nphi);
    if a.xgrid.is_some() {
        c.base_grid = a.xgrid;
    }
    set(&mut cfg.recon_mesh.h_far_m, a.mesh_h);
    set(&mut cfg.recon_mesh.h_electrode_m, a.mesh_h_electrode);
    set(&mut cfg.threshold, a.threshold);
    if a.truth.is_some() {
        cfg.truth_centers_m = a.truth.clone();
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    cfg.force |= a.force;
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn print_summary(out: &RunOutput, dir: &Path) {
    let r = &out.report;
    println!("method {} ({}), modeled domain {}", r.method, r.mode, r.mismodel);
    println!("sigma_best {:.6e} S/m, image range [{:.4e}, {:.4e}]", r.sigma_best, r.image_min, r.image_max);
    match (&r.metrics, &r.metrics_error) {
        (Some(m), _) => {
            println!("{} component(s) above {:.0}% of max", m.components_found, 100.0 * m.threshold_frac);
            for (i, t) in m.targets.iter().enumerate() {
                let sigma = t.max_sigma.map_or("-".to_string(), |s| format!("{s:.4}"));
                println!("  target {i}: LE {:.4} m, scaled LE {:.4}, max sigma {sigma}", t.le_m, t.scaled_le);
            }
        }
        (None, Some(e)) => println!("metrics unavailable: {e}"),
        (None, None) => {}
    }
    println!("total {:.2} s, outputs in {}", r.timings_s.total(), dir.display());
}

fn simulate(a: &SimulateArgs) -> Result<(), EitError> {
    let mut scenario = match (&a.scenario, a.preset) {
        (Some(path), _) => Scenario::load(path)?,
        (None, Some(Preset::Standard)) => Scenario::standard(1)?,
        (None, Some(Preset::TwoTargets)) => Scenario::two_targets(1)?,
        (None, Some(Preset::Homogeneous)) => Scenario::standard(1)?.homogeneous(),
        (None, None) => return Err(config_error("give --scenario or --preset")),
    };
    set(&mut scenario.seed, a.seed);
    set(&mut scenario.phantom.background, a.background);
    prepare_output_dir(&a.out, &["data", "reference", "scenario.json"], a.force)?;
    let sim = simulate_phantom_frames(&scenario)?;
    let bg_ms = 1e3 * scenario.phantom.background;
    save_frames(&a.out.join("data"), &sim.currents, &sim.data_frames, 0.0, bg_ms)?;
    save_frames(&a.out.join("reference"), &sim.currents, &sim.reference_frames, 0.0, bg_ms)?;
    std::fs::write(a.out.join("scenario.json"), serde_json::to_string_pretty(&scenario.to_doc())?)?;
    println!(
        "{} frames of {} patterns on {} electrodes (data mesh {} nodes) written to {}",
        scenario.frames,
        sim.currents.ncols(),
        sim.currents.nrows(),
        sim.data_mesh_nodes,
        a.out.display()
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<(), EitError> {
    let cfg = build_config(&a.recon)?;
    let values = units::values(&a.values).map_err(config_error)?;
    let rows = run_sweep(&cfg, &a.param, &values)?;
    let targets = rows.iter().map(|r| r.scaled_le.len()).max().unwrap_or(0);
    println!("{}", SweepRow::csv_header(targets).join(","));
    for r in &rows {
        println!("{}", r.csv_record(targets).join(","));
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), EitError> {
    let grid = VoxelGrid::read_csv(&a.recon)?;
    let report = evaluate_recon(&grid, &a.truth, a.threshold)?;
    let json = report.to_json()?;
    if let Some(path) = &a.out {
        std::fs::write(path, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn validate_frames(a: &ValidateArgs) -> Result<(), EitError> {
    let (patterns, meta) = load_frames(&a.frames)?;
    let diag = diagnose(&patterns, &meta)?;
    println!("{}", serde_json::to_string_pretty(&diag)?);
    Ok(())
}

fn export_vtk(a: &ExportArgs) -> Result<(), EitError> {
    if a.out.exists() && !a.force {
        return Err(config_error(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    let grid = VoxelGrid::read_csv(&a.recon)?;
    grid.write_vtk(&a.out, &a.name)?;
    info!("wrote {:?} grid to {}", grid.shape, a.out.display());
    Ok(())
}

fn lindiff(a: &LindiffArgs) -> Result<(), EitError> {
    let source = DataSource::Frames { data: a.frames2.clone(), reference: a.frames1.clone(), dims_m: a.dims };
    let mut cfg = RunConfig::new(source, Method::Lindiff, Mode::Difference, a.out.clone());
    cfg.lindiff.std_mult = a.std_mult;
    cfg.lindiff.corr_frac = a.corr_frac;
    cfg.lindiff.cov_pct = a.cov_pct;
    cfg.truth_centers_m = a.truth.clone();
    cfg.force = a.force;
    let out = run_reconstruct(&cfg)?;
    print_summary(&out, &cfg.output_dir);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), EitError> {
    if let Some(jobs) = cli.jobs.filter(|&j| j > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| config_error(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => {
            let cfg = build_config(a)?;
            let out = run_reconstruct(&cfg)?;
            print_summary(&out, &cfg.output_dir);
            Ok(())
        }
        Command::Sweep(a) => sweep(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ValidateFrames(a) => validate_frames(a),
        Command::ExportVtk(a) => export_vtk(a),
        Command::Lindiff(a) => lindiff(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.kind() {
                ErrorKind::Config => "configuration error",
                ErrorKind::Data => "data error",
                ErrorKind::Numerical => "numerical failure",
            };
            eprintln!("cgo-eit: {kind}: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
