//! Independent oracles shared by the integration tests: dense Kronecker
//! solves, an assembled stage Jacobian and a plain GMRES.
#![allow(dead_code)]

use hbvm_core::problems::HamiltonianProblem;
use hbvm_core::HbvmTableau;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Solve `Z E + E R = C` through `(I kron Z + R^T kron I) vec(E) = vec(C)`.
pub fn kronecker_sylvester(z: &DMatrix<f64>, r: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = (z.nrows(), r.nrows());
    let mut big = DMatrix::zeros(p * q, p * q);
    for j in 0..q {
        for i in 0..p {
            for l in 0..p {
                big[(j * p + i, j * p + l)] += z[(i, l)];
            }
            for l in 0..q {
                big[(j * p + i, l * p + i)] += r[(l, j)];
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = big.lu().solve(&rhs).expect("oracle system is nonsingular");
    DMatrix::from_column_slice(p, q, sol.as_slice())
}

/// Dense Sylvester test case with well separated spectra of `Z` and `-R`.
pub struct SylvesterCase {
    pub z: DMatrix<f64>,
    pub z_inv: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

impl SylvesterCase {
    /// `Z = D + 0.3 N` with `D` diagonal in `[1, 5]`; `R` has eigenvalues near `[0.5, 2]`.
    pub fn random(rng: &mut ChaCha8Rng, dim: usize, s: usize, rank: usize) -> Self {
        let mut z = random_matrix(rng, dim, dim) * (0.3 / (dim as f64).sqrt());
        for i in 0..dim {
            z[(i, i)] += rng.random_range(1.0..5.0);
        }
        let mut r = random_matrix(rng, s, s) * 0.2;
        for i in 0..s {
            r[(i, i)] += rng.random_range(0.5..2.0);
        }
        let z_inv = z.clone().try_inverse().expect("diagonally dominant");
        Self { z, z_inv, r, u: random_matrix(rng, dim, rank), v: random_matrix(rng, s, rank) }
    }

    pub fn rhs(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    pub fn oracle(&self) -> DMatrix<f64> {
        kronecker_sylvester(&self.z, &self.r, &self.rhs())
    }
}

/// `dF/dPhi` of the stage residual, assembled block by block: block `(l, j)`
/// of the `2ms x 2ms` matrix is `delta_lj I - h sum_i b_i P_l(c_i) S_ij J_f(y_i)`
/// with `S_ij = int_0^{c_i} P_j` and `y_i` the i-th stage point.
pub fn assembled_stage_jacobian(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    phi: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = y_n.len();
    let (s, k) = (tableau.s(), tableau.k());
    let mut jac = DMatrix::identity(n * s, n * s);
    for i in 0..k {
        let mut y_i = y_n.clone();
        for j in 0..s {
            y_i += phi.column(j) * (h * tableau.i_mat()[(i, j)]);
        }
        let j_i = problem.frozen_jacobian(&y_i).unwrap().apply(&DMatrix::identity(n, n));
        for l in 0..s {
            for j in 0..s {
                let coef = h * tableau.weights()[i] * tableau.w()[(i, l)] * tableau.i_mat()[(i, j)];
                let mut block = jac.view_mut((l * n, j * n), (n, n));
                block -= &j_i * coef;
            }
        }
    }
    jac
}

/// Unpreconditioned GMRES with classical Gram-Schmidt (applied twice) and
/// a dense least-squares solve of the Hessenberg system.
pub fn reference_gmres(a: &DMatrix<f64>, b: &DVector<f64>, tol_rel: f64, max_it: usize) -> (DVector<f64>, usize) {
    let n = b.len();
    let beta = b.norm();
    let mut basis = vec![b / beta];
    let mut hess = DMatrix::zeros(max_it + 1, max_it);
    let mut x = DVector::zeros(n);
    for j in 0..max_it {
        let mut w = a * &basis[j];
        for _ in 0..2 {
            let coeffs: Vec<f64> = basis.iter().map(|v| v.dot(&w)).collect();
            for (i, (v, c)) in basis.iter().zip(&coeffs).enumerate() {
                w -= v * *c;
                hess[(i, j)] += c;
            }
        }
        let norm = w.norm();
        hess[(j + 1, j)] = norm;
        let h = hess.view((0, 0), (j + 2, j + 1)).into_owned();
        let mut e1 = DVector::zeros(j + 2);
        e1[0] = beta;
        let y = h.clone().svd(true, true).solve(&e1, 1e-14).unwrap();
        x = DVector::zeros(n);
        for (i, yi) in y.iter().enumerate() {
            x += &basis[i] * *yi;
        }
        let res = (b - a * &x).norm();
        if res <= tol_rel * beta || norm < 1e-14 * beta {
            return (x, j + 1);
        }
        basis.push(w / norm);
    }
    (x, max_it)
}
