//! Inexact Newton building blocks: flexible GMRES, finite-difference
//! Jacobian actions and the adaptive forcing-term controller.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const DEFAULT_FGMRES_MAX_IT: usize = 50;

#[derive(Debug, Error)]
pub enum FgmresError<E> {
    #[error("FGMRES did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, best: DVector<f64> },
    #[error("FGMRES breakdown at iteration {iterations} with relative residual {residual:e}")]
    Breakdown { iterations: usize, residual: f64 },
    #[error("operator application failed: {0}")]
    Operator(E),
}

#[derive(Debug, Clone)]
pub struct FgmresOutcome {
    pub solution: DVector<f64>,
    pub iterations: usize,
    /// True relative residual `||rhs - A x|| / ||rhs||`, recomputed at exit.
    pub residual: f64,
    pub preconditioner_applications: usize,
    pub converged: bool,
}

/// Right-preconditioned flexible GMRES without restarts.
///
/// `apply_m` may change between calls; the preconditioned directions `Z_j`
/// are stored next to the Arnoldi basis and the update is built from them.
pub fn fgmres<E, A, M>(
    mut apply_a: A,
    mut apply_m: M,
    rhs: &DVector<f64>,
    tol_rel: f64,
    max_it: usize,
) -> Result<FgmresOutcome, FgmresError<E>>
where
    A: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    M: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let n = rhs.len();
    let beta = rhs.norm();
    if beta == 0.0 {
        return Ok(FgmresOutcome {
            solution: DVector::zeros(n),
            iterations: 0,
            residual: 0.0,
            preconditioner_applications: 0,
            converged: true,
        });
    }
    let max_it = max_it.min(n).max(1);
    let mut basis: Vec<DVector<f64>> = vec![rhs / beta];
    let mut precond: Vec<DVector<f64>> = Vec::with_capacity(max_it);
    let mut hess = DMatrix::<f64>::zeros(max_it + 1, max_it);
    let mut rot_c: Vec<f64> = Vec::with_capacity(max_it);
    let mut rot_s: Vec<f64> = Vec::with_capacity(max_it);
    let mut g = DVector::<f64>::zeros(max_it + 1);
    g[0] = beta;

    let mut iters = 0;
    let mut broke_down = false;
    while iters < max_it {
        let j = iters;
        let zj = apply_m(&basis[j]).map_err(FgmresError::Operator)?;
        let mut w = apply_a(&zj).map_err(FgmresError::Operator)?;
        precond.push(zj);
        for (i, vi) in basis.iter().enumerate() {
            let hij = vi.dot(&w);
            hess[(i, j)] = hij;
            w.axpy(-hij, vi, 1.0);
        }
        let hnext = w.norm();
        hess[(j + 1, j)] = hnext;

        for i in 0..j {
            let (a, b) = (hess[(i, j)], hess[(i + 1, j)]);
            hess[(i, j)] = rot_c[i] * a + rot_s[i] * b;
            hess[(i + 1, j)] = -rot_s[i] * a + rot_c[i] * b;
        }
        let (a, b) = (hess[(j, j)], hess[(j + 1, j)]);
        let denom = a.hypot(b);
        let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (a / denom, b / denom) };
        rot_c.push(c);
        rot_s.push(s);
        hess[(j, j)] = denom;
        hess[(j + 1, j)] = 0.0;
        g[j + 1] = -s * g[j];
        g[j] *= c;

        iters += 1;
        if g[j + 1].abs() / beta <= tol_rel {
            break;
        }
        if hnext <= f64::EPSILON * beta {
            broke_down = true;
            break;
        }
        basis.push(w / hnext);
    }

    // back substitution on the rotated Hessenberg
    let mut y = DVector::<f64>::zeros(iters);
    for i in (0..iters).rev() {
        let mut acc = g[i];
        for k in i + 1..iters {
            acc -= hess[(i, k)] * y[k];
        }
        y[i] = if hess[(i, i)] != 0.0 { acc / hess[(i, i)] } else { 0.0 };
    }
    let mut x = DVector::zeros(n);
    for (k, zk) in precond.iter().enumerate() {
        x.axpy(y[k], zk, 1.0);
    }
    let ax = apply_a(&x).map_err(FgmresError::Operator)?;
    let residual = (rhs - ax).norm() / beta;

    if residual <= tol_rel {
        return Ok(FgmresOutcome { solution: x, iterations: iters, residual, preconditioner_applications: iters, converged: true });
    }
    if broke_down {
        return Err(FgmresError::Breakdown { iterations: iters, residual });
    }
    Err(FgmresError::NotConverged { iterations: iters, residual, best: x })
}

/// Finite-difference approximation of `J_F(phi) dir`.
///
/// The step is `1e-7 / ||dir||_F * max(1, ||phi||_F)`; `f_at_phi` is the
/// cached `F(phi)`, so each action costs one evaluation of `F`.
pub fn fd_jacobian_action<E>(
    mut eval: impl FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>, E>,
    phi: &DMatrix<f64>,
    f_at_phi: &DMatrix<f64>,
    dir: &DMatrix<f64>,
) -> Result<DMatrix<f64>, E> {
    let dnorm = dir.norm();
    if dnorm == 0.0 {
        return Ok(DMatrix::zeros(phi.nrows(), phi.ncols()));
    }
    let eps = 1e-7 / dnorm * phi.norm().max(1.0);
    let perturbed = phi + dir * eps;
    let f_pert = eval(&perturbed)?;
    Ok((f_pert - f_at_phi) / eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcingParams {
    pub gamma: f64,
    pub eta_max: f64,
}

impl Default for ForcingParams {
    fn default() -> Self {
        Self { gamma: 0.9, eta_max: 0.9 }
    }
}

/// Adaptive forcing term for one Newton solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingState {
    pub eta: f64,
    pub eta_max: f64,
    pub gamma: f64,
    /// `eps_abs + eps_rel * f_nrm_0`, frozen when the Newton solve starts.
    pub stop_tol: f64,
    pub f_nrm_prev: f64,
}

impl ForcingState {
    /// Starts with `eta = eta_max`.
    pub fn start(params: ForcingParams, tol_abs: f64, tol_rel: f64, f_nrm0: f64) -> Self {
        Self {
            eta: params.eta_max,
            eta_max: params.eta_max,
            gamma: params.gamma,
            stop_tol: tol_abs + tol_rel * f_nrm0,
            f_nrm_prev: f_nrm0,
        }
    }

    /// `eta <- min(eta_max, max(gamma eta^2, gamma rat^2, 0.5 stop_tol / f_nrm))`
    /// with `rat = f_nrm / f_nrm_prev`.
    pub fn update(&mut self, f_nrm: f64) -> f64 {
        self.eta = update_forcing(self, f_nrm, self.f_nrm_prev);
        self.f_nrm_prev = f_nrm;
        self.eta
    }
}

pub fn update_forcing(state: &ForcingState, f_nrm: f64, f_nrm_prev: f64) -> f64 {
    let rat = f_nrm / f_nrm_prev;
    let candidate = (state.gamma * state.eta * state.eta)
        .max(state.gamma * rat * rat)
        .max(0.5 * state.stop_tol / f_nrm);
    candidate.min(state.eta_max)
}

/// `||vec(F)|| / sqrt(n)`.
pub fn normalized_norm(f: &DMatrix<f64>) -> f64 {
    f.norm() / (f.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn ok<T>(v: T) -> Result<T, Infallible> {
        Ok(v)
    }

    #[test]
    fn identity_system_one_iteration() {
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let out = fgmres(|x: &DVector<f64>| ok(x.clone()), |x: &DVector<f64>| ok(x.clone()), &rhs, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.solution - &rhs).amax() < 1e-15);
    }

    #[test]
    fn exact_inverse_preconditioner_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..n {
            a[(i, i)] += 5.0;
        }
        let inv = a.clone().try_inverse().unwrap();
        let rhs = DVector::from_fn(n, |i, _| (i as f64).cos());
        let out = fgmres(|x: &DVector<f64>| ok(&a * x), |x: &DVector<f64>| ok(&inv * x), &rhs, 1e-10, 30).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.residual < 1e-10);
    }

    #[test]
    fn zero_rhs() {
        let rhs = DVector::zeros(3);
        let out = fgmres(|x: &DVector<f64>| ok(x.clone()), |x: &DVector<f64>| ok(x.clone()), &rhs, 1e-8, 5).unwrap();
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn not_converged_returns_best() {
        let n = 30;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 });
        let rhs = DVector::from_element(n, 1.0);
        match fgmres(|x: &DVector<f64>| ok(&a * x), |x: &DVector<f64>| ok(x.clone()), &rhs, 1e-14, 3) {
            Err(FgmresError::NotConverged { iterations, residual, best }) => {
                assert_eq!(iterations, 3);
                assert!(residual < 1.0);
                assert_eq!(best.len(), n);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fd_zero_direction() {
        let phi = DMatrix::from_element(4, 2, 1.0);
        let f = phi.clone();
        let out = fd_jacobian_action(|p: &DMatrix<f64>| ok(p * 2.0), &phi, &f, &DMatrix::zeros(4, 2)).unwrap();
        assert_eq!(out, DMatrix::zeros(4, 2));
    }

    #[test]
    fn fd_exact_for_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let shift = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let phi = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let dir = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let f = |p: &DMatrix<f64>| ok(p * &m + &shift);
        let fphi = f(&phi).unwrap();
        let got = fd_jacobian_action(f, &phi, &fphi, &dir).unwrap();
        let want = &dir * &m;
        assert!((got - &want).norm() <= 1e-8 * want.norm());

        // with F(phi) = 0 the difference quotient has no cancellation
        let g = |p: &DMatrix<f64>| ok(p * &m);
        let zero = DMatrix::zeros(6, 3);
        let got = fd_jacobian_action(g, &zero, &zero, &dir).unwrap();
        assert!((got - &want).norm() <= 1e-12 * want.norm());
    }

    #[test]
    fn forcing_examples() {
        let state = ForcingState { eta: 0.9, eta_max: 0.9, gamma: 0.9, stop_tol: 2e-6, f_nrm_prev: 1.0 };
        // rat = 0.1, 0.5 * stop_tol / f_nrm = 1e-5
        let eta = update_forcing(&state, 0.1, 1.0);
        assert!((eta - 0.729).abs() < 1e-15);

        let state = ForcingState { eta: 0.1, eta_max: 0.9, gamma: 0.9, stop_tol: 1e-8, f_nrm_prev: 1e-8 };
        let eta = update_forcing(&state, 1e-8, 1e-8);
        assert!((eta - 0.9).abs() < 1e-15);

        let state = ForcingState { eta: 0.1, eta_max: 0.9, gamma: 0.9, stop_tol: 1e-8, f_nrm_prev: 1e-7 };
        let eta = update_forcing(&state, 1e-8, 1e-7);
        assert!((eta - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forcing_decreases_below_cap_for_contracting_residuals() {
        let mut st = ForcingState::start(ForcingParams::default(), 1e-8, 1e-10, 1.0);
        let mut f = 1.0;
        let mut last = st.eta;
        for _ in 0..6 {
            f *= 0.1;
            last = st.update(f);
        }
        assert!(last < st.eta_max);
    }

    proptest! {
        #[test]
        fn forcing_never_exceeds_cap(eta in 0.0f64..0.9, gamma in 0.01f64..1.0, f in 1e-12f64..1e3, fp in 1e-12f64..1e3, stop in 1e-12f64..1.0) {
            let st = ForcingState { eta, eta_max: 0.9, gamma, stop_tol: stop, f_nrm_prev: fp };
            let out = update_forcing(&st, f, fp);
            prop_assert!(out <= 0.9 && out >= 0.0);
        }

        #[test]
        fn forcing_monotone_in_ratio(eta in 0.0f64..0.9, f in 1e-6f64..1.0, fp1 in 1e-3f64..1.0, fp2 in 1e-3f64..1.0, stop in 1e-12f64..1e-6) {
            let st = ForcingState { eta, eta_max: 0.9, gamma: 0.9, stop_tol: stop, f_nrm_prev: fp1 };
            let (lo, hi) = if fp1 > fp2 { (fp1, fp2) } else { (fp2, fp1) };
            // larger previous residual means smaller ratio
            prop_assert!(update_forcing(&st, f, lo) <= update_forcing(&st, f, hi));
        }

        #[test]
        fn forcing_monotone_in_stop_tol(eta in 0.0f64..0.9, f in 1e-6f64..1.0, fp in 1e-3f64..1.0, s1 in 1e-12f64..1e-2, s2 in 1e-12f64..1e-2) {
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            let a = ForcingState { eta, eta_max: 0.9, gamma: 0.9, stop_tol: lo, f_nrm_prev: fp };
            let b = ForcingState { stop_tol: hi, ..a.clone() };
            prop_assert!(update_forcing(&a, f, fp) <= update_forcing(&b, f, fp));
        }

        #[test]
        fn fd_is_linear_in_direction_for_affine_maps(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let phi = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            let d1 = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            let d2 = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            let f = |p: &DMatrix<f64>| ok(p * &m);
            let fphi = f(&phi).unwrap();
            let combo = &d1 * alpha + &d2;
            let lhs = fd_jacobian_action(f, &phi, &fphi, &combo).unwrap();
            let rhs = fd_jacobian_action(f, &phi, &fphi, &d1).unwrap() * alpha + fd_jacobian_action(f, &phi, &fphi, &d2).unwrap();
            prop_assert!((lhs - rhs).norm() <= 1e-7 * (combo.norm() + 1.0));
        }
    }
}
