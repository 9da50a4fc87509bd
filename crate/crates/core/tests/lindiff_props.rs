use cgo_eit::dn::mean_free_basis;
use cgo_eit::forward::{jacobian_sigma, ConductivityField, JacobianMatrix};
use cgo_eit::geometry::{tank_layout, BoxDomain, DEFAULT_CONTACT_IMPEDANCE};
use cgo_eit::lindiff::{build_prior, correlation_length, reconstruct_linear_diff, NoiseModel};
use cgo_eit::mesh::{mesh_box, MeshOptions};
use nalgebra::DMatrix;

fn setup() -> (Vec<[f64; 3]>, JacobianMatrix) {
    let layout = tank_layout(BoxDomain::tank(), DEFAULT_CONTACT_IMPEDANCE).unwrap();
    let mesh = mesh_box(&layout, MeshOptions::new(0.045, 0.045)).unwrap();
    let i = mean_free_basis(layout.len()).matrix().clone();
    let sigma0 = ConductivityField::constant(mesh.node_count(), 0.024).unwrap();
    let jac = jacobian_sigma(&mesh, &sigma0, &layout, &i).unwrap();
    (mesh.nodes.clone(), jac)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn smooth_change_is_recovered_from_nearly_noiseless_data() {
    let (nodes, jac) = setup();
    let target: Vec<f64> = nodes
        .iter()
        .map(|p| 0.01 * (-((p[0] - 0.02).powi(2) + (p[1] + 0.04).powi(2) + p[2].powi(2)) / (2.0 * 0.05f64.powi(2))).exp())
        .collect();
    let dv: Vec<f64> = (&jac.matrix * nalgebra::DVector::from_vec(target.clone())).iter().copied().collect();
    let vmax = dv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let noise = NoiseModel::new(vec![1e-6 * vmax; dv.len()]).unwrap();
    let prior = build_prior(&nodes, 0.05, 0.255 / 8.0, 0.01).unwrap();
    let x = reconstruct_linear_diff(&jac, &dv, &noise, &prior).unwrap();
    let err = rel_l2(&x, &target);
    assert!(err < 0.10, "relative L2 error {err}");
}

#[test]
fn node_permutation_commutes_with_the_solve() {
    let (nodes, jac) = setup();
    let n = nodes.len();
    let dv: Vec<f64> = (0..jac.rows()).map(|k| 1e-3 * ((k as f64) * 0.37).sin()).collect();
    // Noise comparable to the prior keeps the normal equations well conditioned,
    // so the comparison is limited by round-off only.
    let noise = NoiseModel::new(vec![0.4 * jac.matrix.amax(); dv.len()]).unwrap();
    let d = 0.255 / 8.0;
    let x = reconstruct_linear_diff(&jac, &dv, &noise, &build_prior(&nodes, 0.4, d, 0.01).unwrap()).unwrap();

    let perm: Vec<usize> = (0..n).map(|k| (k * 7 + 3) % n).collect();
    assert!(n % 7 != 0);
    let pnodes: Vec<[f64; 3]> = perm.iter().map(|&k| nodes[k]).collect();
    let pjac = JacobianMatrix { matrix: DMatrix::from_fn(jac.rows(), n, |r, c| jac.matrix[(r, perm[c])]) };
    let px = reconstruct_linear_diff(&pjac, &dv, &noise, &build_prior(&pnodes, 0.4, d, 0.01).unwrap()).unwrap();
    let mut back = vec![0.0; n];
    for (c, &k) in perm.iter().enumerate() {
        back[k] = px[c];
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = back.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
    assert!(dev <= 1e-9, "max deviation {dev:e}");
}

#[test]
fn default_correlation_length() {
    let d = 0.255 / 8.0;
    assert!((correlation_length(d, 0.01) - d / 3.034854258770293).abs() < 1e-12);
}

