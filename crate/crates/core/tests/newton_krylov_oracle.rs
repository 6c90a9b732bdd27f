mod common;

use std::convert::Infallible;

use common::{assembled_stage_jacobian, reference_gmres};
use hbvm_core::integrator::{apply_stage_preconditioner, eval_residual, MatrixSolver};
use hbvm_core::newton_krylov::{fd_jacobian_action, fgmres};
use hbvm_core::problems::{build_linear_wave, build_semilinear_wave, gaussian_pulse, HamiltonianProblem, Potential};
use hbvm_core::HbvmTableau;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

#[test]
fn fd_action_matches_assembled_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let prob = build_semilinear_wave(32, 1.0, Potential::cubic()).unwrap();
    let y_n = prob.initial_state(gaussian_pulse(0.0), |_| 0.0);
    let h = 1.0 / 32.0;
    for (k, s) in [(3, 2), (4, 3)] {
        let tab = HbvmTableau::new(k, s).unwrap();
        for pair in 0..20 {
            let phi = random_matrix(&mut rng, y_n.len(), s, 1.0);
            let dir = random_matrix(&mut rng, y_n.len(), s, 1.0);
            let f_phi = eval_residual(&prob, &tab, &y_n, h, &phi).unwrap();
            let fd = fd_jacobian_action(|p: &DMatrix<f64>| eval_residual(&prob, &tab, &y_n, h, p), &phi, &f_phi, &dir).unwrap();
            let jac = assembled_stage_jacobian(&prob, &tab, &y_n, h, &phi);
            let exact = jac * DVector::from_column_slice(dir.as_slice());
            let rel = (DVector::from_column_slice(fd.as_slice()) - &exact).norm() / exact.norm();
            assert!(rel <= 1e-5, "({k},{s}) pair {pair}: {rel:e}");
        }
    }
}

#[test]
fn fgmres_matches_reference_gmres() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 50;
    let mut a = random_matrix(&mut rng, n, n, 0.5 / (n as f64).sqrt());
    for i in 0..n {
        a[(i, i)] += 2.0;
    }
    let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let exact = a.clone().lu().solve(&b).unwrap();
    let out = fgmres(|v: &DVector<f64>| Ok::<_, Infallible>(&a * v), |v: &DVector<f64>| Ok(v.clone()), &b, 1e-10, 50).unwrap();
    let (x_ref, it_ref) = reference_gmres(&a, &b, 1e-10, 50);
    assert!((&out.solution - &exact).norm() / exact.norm() < 1e-9);
    assert!((&out.solution - &x_ref).norm() / x_ref.norm() < 1e-9);
    assert!(out.iterations.abs_diff(it_ref) <= 1, "{} vs {it_ref}", out.iterations);
}

#[test]
fn fgmres_with_exact_inverse_takes_one_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 30;
    let mut a = random_matrix(&mut rng, n, n, 1.0);
    for i in 0..n {
        a[(i, i)] += 6.0;
    }
    let inv = a.clone().try_inverse().unwrap();
    let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let out = fgmres(|v: &DVector<f64>| Ok::<_, Infallible>(&a * v), |v: &DVector<f64>| Ok(&inv * v), &b, 1e-10, 10).unwrap();
    assert_eq!(out.iterations, 1);
}

#[test]
fn stage_preconditioner_inverts_linear_stage_jacobian() {
    // For f(y) = G y the frozen Jacobian is exact, so FGMRES needs one iteration.
    let prob = build_linear_wave(64, 1.0).unwrap();
    let y_n = prob.initial_state(gaussian_pulse(0.5), |_| 0.0);
    let tab = HbvmTableau::new(3, 2).unwrap();
    let h = 1.0 / 64.0;
    let jac = prob.frozen_jacobian(&y_n).unwrap();
    let phi = DMatrix::zeros(y_n.len(), 2);
    let a = assembled_stage_jacobian(&prob, &tab, &y_n, h, &phi);
    let f = eval_residual(&prob, &tab, &y_n, h, &phi).unwrap();
    let rhs = DVector::from_column_slice(f.as_slice());
    let out = fgmres(
        |v: &DVector<f64>| Ok::<_, hbvm_core::SylvesterError>(&a * v),
        |v: &DVector<f64>| apply_stage_preconditioner(jac.as_ref(), &tab, h, v, MatrixSolver::Extended, 1e-12, 100).map(|r| r.0),
        &rhs,
        1e-8,
        10,
    )
    .unwrap();
    assert_eq!(out.iterations, 1);
}

#[test]
fn stage_preconditioner_tends_to_identity_as_h_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prob = build_semilinear_wave(32, 1.0, Potential::cubic()).unwrap();
    let y_n = prob.initial_state(gaussian_pulse(0.0), |_| 0.0);
    let tab = HbvmTableau::new(3, 2).unwrap();
    let jac = prob.frozen_jacobian(&y_n).unwrap();
    let jac_norm = jac.apply(&DMatrix::identity(y_n.len(), y_n.len())).norm();
    let x_norm = tab.x().norm();
    let r = DVector::from_fn(y_n.len() * 2, |_, _| rng.random_range(-1.0..1.0));
    for h in [1e-3, 1e-4, 1e-5] {
        let (w, _) = apply_stage_preconditioner(jac.as_ref(), &tab, h, &r, MatrixSolver::Extended, 1e-12, 100).unwrap();
        let rel = (&w - &r).norm() / r.norm();
        assert!(rel <= 10.0 * h * jac_norm * x_norm, "h={h}: {rel:e}");
    }
}
