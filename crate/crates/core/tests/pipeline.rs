use std::f64::consts::PI;

use etalab_core::assembly::{assemble, ProblemSpec};
use etalab_core::eigen::solve_lowest;
use etalab_core::fieldexpr::{ScalarField, TensorField, VectorField};
use etalab_core::geometry::{MetricSpec, WeightSpec};
use etalab_core::hadamard::q_metric;
use etalab_core::mesh::{generate, DomainSpec, Mesh};
use etalab_core::verify::fd_eigen_derivative_metric;

fn lambda1(mesh: Mesh) -> f64 {
    let ps = ProblemSpec::flat(mesh, WeightSpec::unweighted());
    solve_lowest(&assemble(&ps).unwrap(), 1).unwrap().eigenvalues[0]
}

#[test]
fn mesh_text_roundtrip_keeps_spectrum() {
    let mesh = generate(&DomainSpec::annulus(0.5, 1.0, 24)).unwrap();
    let back = Mesh::from_text(&mesh.to_text()).unwrap();
    assert_eq!(back.num_cells(), mesh.num_cells());
    assert_eq!(lambda1(back), lambda1(mesh));
}

#[test]
fn refinement_converges_at_second_order() {
    let exact = 2.0 * PI * PI;
    let mesh = generate(&DomainSpec::square(1.0, 8)).unwrap();
    let fine = mesh.refine();
    let finer = fine.refine();
    let errs: Vec<f64> = [mesh, fine, finer].into_iter().map(|m| lambda1(m) - exact).collect();
    assert!(errs.iter().all(|&e| e > 0.0), "P1 eigenvalues sit above the exact one");
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order > 1.8, "order {order}");
    }
}

#[test]
fn weighted_interval_matches_closed_form() {
    // e^{-cx} weight: lambda_k = c^2/4 + k^2 pi^2
    let mesh = generate(&DomainSpec::interval(0.0, 1.0, 512)).unwrap();
    let ps = ProblemSpec::flat(mesh, WeightSpec::from_eta(ScalarField::parse("2*x").unwrap()));
    let sol = solve_lowest(&assemble(&ps).unwrap(), 3).unwrap();
    for (k, l) in sol.eigenvalues.iter().enumerate() {
        let kk = (k + 1) as f64;
        let exact = 1.0 + kk * kk * PI * PI;
        assert!((l / exact - 1.0).abs() < 1e-4, "{l} vs {exact}");
    }
}

#[test]
fn shears_are_stationary_for_lambda1_of_the_square() {
    // off-diagonal metric direction, the linearized pullback of x -> x + t(y, 0)
    let mesh = generate(&DomainSpec::square(1.0, 16)).unwrap();
    let h = TensorField::parse_upper(&[vec!["0".into(), "1".into()], vec!["0".into()]]).unwrap();
    let metric = MetricSpec::flat(2).with_perturbation(h).unwrap();
    let ps = ProblemSpec::new(mesh.clone(), metric, WeightSpec::unweighted()).unwrap();
    let sol = solve_lowest(&assemble(&ps).unwrap(), 1).unwrap();
    let q = q_metric(&sol, 0..1, &ps).unwrap().branch_slopes[0];
    let fd = fd_eigen_derivative_metric(&ps, 0..1, 1e-4).unwrap()[0];
    assert!((q - fd).abs() < 1e-6 * q.abs().max(1.0), "{q} vs {fd}");

    let v = VectorField::parse(&["y".into(), "0".into()]).unwrap();
    let moved = |t: f64| lambda1(mesh.deform(&v, t).unwrap());
    let shear = (moved(1e-3) - moved(-1e-3)) / 2e-3;
    assert!(q.abs() < 1e-8 * sol.eigenvalues[0], "{q}");
    assert!(shear.abs() < 1e-6 * sol.eigenvalues[0], "{shear}");
}

#[test]
fn two_triangle_text_mesh_imports() {
    let text = "2 4 2 4
0.0000000000000000e0 0.0000000000000000e0
1.0000000000000000e0 0.0000000000000000e0
0.0000000000000000e0 1.0000000000000000e0
1.0000000000000000e0 1.0000000000000000e0
0 1 3
0 3 2
0 1 0
1 3 0
3 2 1
2 0 1
";
    let mesh = Mesh::from_text(text).unwrap();
    assert_eq!(mesh.num_cells(), 2);
    assert!((mesh.total_volume() - 1.0).abs() < 1e-15);
    assert!(Mesh::from_text(&text.replace("3 2 1\n", "3 2 0\n")).is_err());
}
