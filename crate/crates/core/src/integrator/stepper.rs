//! Single HBVM(k,s) steps.
//!
//! The unknown is the 2m x s stage matrix `Phi` holding the Legendre
//! coefficients of the stage derivative. Every linear solve involving the
//! frozen Jacobian `J` has the form `D - h J D X^T = F1 F2^T`, which is turned
//! into the Sylvester equation `Z D + D X^T = (Z F1) F2^T` with
//! `Z = -h^{-1} J^{-1}` and `Z^{-1} = -h J`, and then solved by Krylov
//! projection. With this scaling the Sylvester solution is `D` itself.

use nalgebra::{DMatrix, DVector};

use super::{IntegratorError, MatrixSolver, SolverOptions, StepStats};
use crate::matrix_equations::{
    krylov_sylvester_extended, krylov_sylvester_poly, lowrank_factor, KrylovStats, SylvesterError, SylvesterProblem,
};
use crate::newton_krylov::{fd_jacobian_action, fgmres, normalized_norm, FgmresError, ForcingState};
use crate::problems::{HamiltonianProblem, JacobianOperator};
use crate::tableau::HbvmTableau;

/// Fixed-point warm start stops once consecutive iterates differ by less than this.
const WARMUP_TOL: f64 = 1e-2;
const WARMUP_MAX_IT: usize = 20;
const LOWRANK_TOL: f64 = 1e-12;

/// Stage points `y_n + h Phi I^T e_i` as the columns of a 2m x k matrix.
pub fn stage_points(tableau: &HbvmTableau, y_n: &DVector<f64>, h: f64, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut pts = phi * tableau.i_mat().transpose() * h;
    for mut col in pts.column_iter_mut() {
        col += y_n;
    }
    pts
}

/// `[f(stage_1) | ... | f(stage_k)] B W`: exactly k evaluations of `f`.
fn projected_rhs(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    phi: &DMatrix<f64>,
) -> DMatrix<f64> {
    let f_stages = problem.rhs_columns(&stage_points(tableau, y_n, h, phi));
    f_stages * tableau.bw()
}

/// Stage residual `F(Phi) = Phi - [f(stage_i)]_i B W`.
pub fn eval_residual(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    phi: &DMatrix<f64>,
) -> Result<DMatrix<f64>, IntegratorError> {
    let res = phi - projected_rhs(problem, tableau, y_n, h, phi);
    if res.iter().all(|v| v.is_finite()) {
        Ok(res)
    } else {
        Err(IntegratorError::NonFiniteResidual)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmupStats {
    pub iterations: usize,
    pub halvings: usize,
    pub final_h: f64,
}

/// Fixed-point iteration `Phi <- [f(y_n + hbar Phi I^T e_i)] B W` from `Phi = 0`.
///
/// When the update norm grows, the last iterate is discarded and `hbar` is
/// halved. The returned iterate seeds Newton, which runs with the original `h`.
pub fn fixed_point_warmup(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
) -> (DMatrix<f64>, WarmupStats) {
    let mut phi = DMatrix::zeros(y_n.len(), tableau.s());
    let mut hbar = h;
    let mut prev_diff = f64::INFINITY;
    let mut stats = WarmupStats::default();
    while stats.iterations < WARMUP_MAX_IT {
        let next = projected_rhs(problem, tableau, y_n, hbar, &phi);
        stats.iterations += 1;
        let diff = (&next - &phi).norm();
        if !diff.is_finite() || diff > prev_diff {
            hbar *= 0.5;
            stats.halvings += 1;
            continue;
        }
        phi = next;
        prev_diff = diff;
        if diff < WARMUP_TOL {
            break;
        }
    }
    stats.final_h = hbar;
    (phi, stats)
}

/// Solve `D - h J D X^T = rhs` by low-rank factorization and Krylov projection.
pub fn solve_stage_equation(
    jac: &dyn JacobianOperator,
    tableau: &HbvmTableau,
    h: f64,
    rhs: &DMatrix<f64>,
    solver: MatrixSolver,
    tol: f64,
    max_it: usize,
) -> Result<(DMatrix<f64>, KrylovStats), SylvesterError> {
    let factors = lowrank_factor(rhs, LOWRANK_TOL);
    if factors.rank() == 0 {
        return Ok((DMatrix::zeros(rhs.nrows(), rhs.ncols()), KrylovStats { converged: true, ..Default::default() }));
    }
    solve_stage_equation_factored(jac, tableau, h, &factors.left, &factors.right, solver, tol, max_it)
}

#[allow(clippy::too_many_arguments)]
fn solve_stage_equation_factored(
    jac: &dyn JacobianOperator,
    tableau: &HbvmTableau,
    h: f64,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    solver: MatrixSolver,
    tol: f64,
    max_it: usize,
) -> Result<(DMatrix<f64>, KrylovStats), SylvesterError> {
    let apply_z = |x: &DMatrix<f64>| jac.solve(x) * (-1.0 / h);
    let apply_z_inv = |x: &DMatrix<f64>| jac.apply(x) * (-h);
    let prob = SylvesterProblem {
        apply_z: &apply_z,
        apply_z_inverse: Some(&apply_z_inv),
        r: tableau.x().transpose(),
        u: apply_z(left),
        v: right.clone(),
    };
    let sol = match solver {
        MatrixSolver::Polynomial => krylov_sylvester_poly(&prob, tol, max_it)?,
        MatrixSolver::Extended => krylov_sylvester_extended(&prob, tol, max_it)?,
    };
    Ok((sol.solution(), sol.stats))
}

/// Linear step: `Phi - h G Phi X^T = (G y_n)(W^T b)^T`.
pub(super) fn linear_step_increment(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, StepStats), IntegratorError> {
    let g = problem.linear_operator().ok_or(IntegratorError::NotLinear)?;
    let f1 = g.apply(&DMatrix::from_column_slice(y_n.len(), 1, y_n.as_slice()));
    let f2 = tableau.w().transpose() * tableau.weights();
    let f2 = DMatrix::from_column_slice(f2.len(), 1, f2.as_slice());
    let (phi, kstats) =
        solve_stage_equation_factored(g.as_ref(), tableau, h, &f1, &f2, opts.matrix_solver, opts.matrix_tol, opts.matrix_max_it)?;
    let stats = StepStats { h_used: h, matrix_eq_iters: vec![kstats.iterations], ..Default::default() };
    Ok((phi.column(0) * h, stats))
}

/// Simplified Newton: every correction solves `D - h J_f D X^T = F(Phi)` with
/// `J_f` frozen at `y_n`, then `Phi <- Phi - D`.
pub(super) fn simplified_newton_step_increment(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, StepStats), IntegratorError> {
    let jac = problem.frozen_jacobian(y_n)?;
    let (mut phi, warm) = fixed_point_warmup(problem, tableau, y_n, h);
    let mut stats = StepStats { h_used: h, warmup_iters: warm.iterations, warmup_halvings: warm.halvings, ..Default::default() };

    let mut f = eval_residual(problem, tableau, y_n, h, &phi)?;
    let mut f_nrm = normalized_norm(&f);
    let stop_tol = opts.newton_abs + opts.newton_rel * f_nrm;
    stats.newton_residuals.push(f.norm());
    while f_nrm >= stop_tol {
        if stats.newton_iters >= opts.max_newton {
            return Err(IntegratorError::NewtonDidNotConverge { iterations: stats.newton_iters, residual: f_nrm });
        }
        let inner_tol = opts.matrix_tol.min(0.01 * f_nrm);
        let (delta, kstats) =
            solve_stage_equation(jac.as_ref(), tableau, h, &f, opts.matrix_solver, inner_tol, opts.matrix_max_it)?;
        phi -= delta;
        f = eval_residual(problem, tableau, y_n, h, &phi)?;
        f_nrm = normalized_norm(&f);
        stats.newton_iters += 1;
        stats.matrix_eq_iters.push(kstats.iterations);
        stats.newton_residuals.push(f.norm());
    }
    stats.residual_final = f.norm();
    Ok((phi.column(0) * h, stats))
}

/// Preconditioner: one simplified-Newton solve `W - h J_f W X^T = R` on the
/// reshaped FGMRES vector.
pub fn apply_stage_preconditioner(
    jac: &dyn JacobianOperator,
    tableau: &HbvmTableau,
    h: f64,
    residual_vec: &DVector<f64>,
    solver: MatrixSolver,
    inner_tol: f64,
    max_it: usize,
) -> Result<(DVector<f64>, KrylovStats), SylvesterError> {
    let s = tableau.s();
    let r = DMatrix::from_column_slice(residual_vec.len() / s, s, residual_vec.as_slice());
    let (w, kstats) = solve_stage_equation(jac, tableau, h, &r, solver, inner_tol, max_it)?;
    Ok((DVector::from_column_slice(w.as_slice()), kstats))
}

/// Full Newton with matrix-free Jacobian actions, solved by FGMRES
/// preconditioned with the frozen-Jacobian matrix equation.
pub(super) fn newton_krylov_step_increment(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, StepStats), IntegratorError> {
    let jac = problem.frozen_jacobian(y_n)?;
    let (mut phi, warm) = fixed_point_warmup(problem, tableau, y_n, h);
    let mut stats = StepStats { h_used: h, warmup_iters: warm.iterations, warmup_halvings: warm.halvings, ..Default::default() };
    let (rows, s) = phi.shape();

    let mut f = eval_residual(problem, tableau, y_n, h, &phi)?;
    let mut f_nrm = normalized_norm(&f);
    let mut forcing = ForcingState::start(opts.forcing, opts.newton_abs, opts.newton_rel, f_nrm);
    stats.newton_residuals.push(f.norm());

    while f_nrm >= forcing.stop_tol {
        if stats.newton_iters >= opts.max_newton {
            return Err(IntegratorError::NewtonDidNotConverge { iterations: stats.newton_iters, residual: f_nrm });
        }
        let eta = forcing.eta;
        let inner_tol = opts.matrix_tol.min(0.01 * eta);
        let mut inner_iters = 0usize;
        let rhs = DVector::from_column_slice(f.as_slice());
        let outcome = {
            let phi_ref = &phi;
            let f_ref = &f;
            let apply_a = |v: &DVector<f64>| -> Result<DVector<f64>, IntegratorError> {
                let dir = DMatrix::from_column_slice(rows, s, v.as_slice());
                let jv = fd_jacobian_action(|p: &DMatrix<f64>| eval_residual(problem, tableau, y_n, h, p), phi_ref, f_ref, &dir)?;
                Ok(DVector::from_column_slice(jv.as_slice()))
            };
            let apply_m = |v: &DVector<f64>| -> Result<DVector<f64>, IntegratorError> {
                let (z, ks) =
                    apply_stage_preconditioner(jac.as_ref(), tableau, h, v, opts.matrix_solver, inner_tol, opts.matrix_max_it)?;
                inner_iters += ks.iterations;
                Ok(z)
            };
            fgmres(apply_a, apply_m, &rhs, eta, opts.fgmres_max_it)
        };
        let (delta, iters, lin_res) = match outcome {
            Ok(out) => (out.solution, out.iterations, out.residual),
            // inexact step: take the best iterate and let the outer test decide
            Err(FgmresError::NotConverged { iterations, residual, best }) => (best, iterations, residual),
            Err(FgmresError::Breakdown { iterations, residual }) => {
                return Err(IntegratorError::LinearSolverFailure { iterations, residual })
            }
            Err(FgmresError::Operator(e)) => return Err(e),
        };
        phi -= DMatrix::from_column_slice(rows, s, delta.as_slice());
        f = eval_residual(problem, tableau, y_n, h, &phi)?;
        f_nrm = normalized_norm(&f);
        forcing.update(f_nrm);

        stats.newton_iters += 1;
        stats.fgmres_iters_per_newton.push(iters);
        stats.fgmres_targets.push(eta);
        stats.fgmres_residuals.push(lin_res);
        stats.matrix_eq_iters.push(inner_iters);
        stats.newton_residuals.push(f.norm());
    }
    stats.residual_final = f.norm();
    Ok((phi.column(0) * h, stats))
}

// The `*_increment` functions return `y_{n+1} - y_n = h phi_0`, which the time
// loop adds with compensated summation; the public steppers return `y_{n+1}`.

macro_rules! full_step {
    ($(#[$doc:meta])* $name:ident, $inner:ident) => {
        $(#[$doc])*
        pub fn $name(
            problem: &dyn HamiltonianProblem,
            tableau: &HbvmTableau,
            y_n: &DVector<f64>,
            h: f64,
            opts: &SolverOptions,
        ) -> Result<(DVector<f64>, StepStats), IntegratorError> {
            let (inc, stats) = $inner(problem, tableau, y_n, h, opts)?;
            Ok((y_n + inc, stats))
        }
    };
}

full_step!(
    /// One step for `f(y) = G y`: a single Sylvester solve with the rank-one
    /// right-hand side `(G y_n)(W^T b)^T`.
    linear_step,
    linear_step_increment
);
full_step!(
    /// Simplified Newton step; see [`simplified_newton_step_increment`].
    simplified_newton_step,
    simplified_newton_step_increment
);
full_step!(
    /// Newton-Krylov step; see [`newton_krylov_step_increment`].
    newton_krylov_step,
    newton_krylov_step_increment
);
