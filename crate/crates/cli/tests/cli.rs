use std::path::Path;
use std::process::{Command, Output};

use cgo_eit::dn::save_frames;
use cgo_eit::phantom::{DataMeshSpec, Scenario};
use cgo_eit::voxel::VoxelGrid;
use cgo_eit::geometry::BoxDomain;
use nalgebra::DMatrix;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgo-eit")).args(args).env_remove("CGO_EIT_JOBS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn blob_csv(dir: &Path) -> std::path::PathBuf {
    let d = BoxDomain::new(0.17, 0.255, 0.17).unwrap();
    let g = VoxelGrid::from_fn(d, [16, 24, 16], |p| {
        let r2 = (p[0] - 0.02).powi(2) + (p[1] + 0.03).powi(2) + p[2].powi(2);
        (-r2 / 2e-4).exp()
    })
    .unwrap();
    let path = dir.join("blob.csv");
    g.write_csv(&path).unwrap();
    path
}

#[test]
fn evaluate_reports_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blob_csv(dir.path());
    let out = cli(&["evaluate", "--recon", csv.to_str().unwrap(), "--truth", "2cm,-30mm,0", "--threshold", "0.7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["schema_version"], "1.0");
    assert_eq!(v["components_found"], 1);
    // The blob is off the voxel centers, so the centroid moves by under a voxel.
    assert!(v["targets"][0]["le_m"].as_f64().unwrap() < 0.005);
}

#[test]
fn export_vtk_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let csv = blob_csv(dir.path());
    let vtk = dir.path().join("blob.vtk");
    let args = ["export-vtk", "--recon", csv.to_str().unwrap(), "--out", vtk.to_str().unwrap()];
    assert_eq!(code(&cli(&args)), 0);
    let text = std::fs::read_to_string(&vtk).unwrap();
    assert!(text.contains("DIMENSIONS 16 24 16"));
    assert_eq!(code(&cli(&args)), 2);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&cli(&forced)), 0);
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = cli(&[
        "sweep",
        "--scenario",
        "unused.json",
        "--param",
        "t_xi",
        "--values",
        "",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1);
    assert!(table.starts_with("value,"));
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let o = o.to_str().unwrap();
    // configuration: lindiff is difference-only
    let out = cli(&["reconstruct", "--scenario", "s.json", "--method", "lindiff", "--mode", "absolute", "--out", o]);
    assert_eq!(code(&out), 2);
    // configuration: unknown sweep parameter
    assert_eq!(code(&cli(&["sweep", "--scenario", "s.json", "--param", "bogus", "--values", "1", "--out", o])), 2);
    // usage: unknown unit
    assert_eq!(code(&cli(&["evaluate", "--recon", "r.csv", "--truth", "1ft,0,0"])), 2);
    // data: missing input
    assert_eq!(code(&cli(&["reconstruct", "--scenario", "missing.json", "--out", o])), 3);
    assert_eq!(code(&cli(&["validate-frames", "--frames", "missing"])), 3);
}

#[test]
fn jobs_env_var_is_parsed() {
    let out = Command::new(env!("CARGO_BIN_EXE_cgo-eit"))
        .args(["validate-frames", "--frames", "missing"])
        .env("CGO_EIT_JOBS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn validate_frames_prints_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let l = 4;
    let i = DMatrix::from_fn(l, 3, |r, c| if r == c { 1e-3 } else if r == c + 1 { -1e-3 } else { 0.0 });
    let v = &i * 250.0;
    save_frames(dir.path(), &i, &[v.clone(), v], 1e4, 24.0).unwrap();
    let out = cli(&["validate-frames", "--frames", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let d: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(d["electrodes"], 4);
    assert_eq!(d["frames"], 2);
    assert_eq!(d["basis_rank"], 3);
}

#[test]
fn simulate_then_reconstruct_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = Scenario::standard(5).unwrap();
    scenario.frames = 2;
    scenario.data_mesh = DataMeshSpec { h_far_m: 0.02, h_electrode_m: 0.008 };
    let scen_path = dir.path().join("scenario.json");
    std::fs::write(&scen_path, serde_json::to_string(&scenario.to_doc()).unwrap()).unwrap();
    let sim_dir = dir.path().join("sim");
    let out = cli(&["simulate", "--scenario", scen_path.to_str().unwrap(), "--out", sim_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sim_dir.join("data/voltages.csv").exists() && sim_dir.join("reference/meta.json").exists());

    let run = |name: &str| {
        let o = dir.path().join(name);
        let out = cli(&[
            "reconstruct",
            "--frames",
            sim_dir.join("data").to_str().unwrap(),
            "--reference",
            sim_dir.join("reference").to_str().unwrap(),
            "--dims",
            "17x25.5x17cm",
            "--method",
            "calderon",
            "--mode",
            "difference",
            "--mesh-h",
            "3cm",
            "--mesh-h-electrode",
            "8mm",
            "--out",
            o.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        o
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["recon.vtk", "recon.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "calderon");
    assert!(report["timings_s"].is_object() || report["timings_s"].is_array());
}
