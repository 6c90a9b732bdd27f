//! HBVM(k,s) coefficient construction.
//!
//! The method is described by `s` orthonormal shifted Legendre polynomials on
//! `[0, 1]` sampled at the `k` Gauss-Legendre nodes. Everything the steppers
//! need (`W`, `I`, `X`, the Butcher matrix) is assembled once here and shared
//! read-only afterwards.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableauError {
    #[error("quadrature rule needs at least one node")]
    EmptyRule,
    #[error("HBVM({k},{s}) requires k >= s >= 1")]
    InvalidOrder { k: usize, s: usize },
}

/// Orthonormal shifted Legendre polynomial `P_ell` on `[0, 1]`, normalized so
/// that `P_ell(1) = sqrt(2 ell + 1) > 0`.
pub fn shifted_legendre(ell: usize, x: f64) -> f64 {
    let t = 2.0 * x - 1.0;
    let (mut prev, mut cur) = (0.0, 1.0);
    for n in 0..ell {
        let n = n as f64;
        let next = ((2.0 * n + 1.0) * t * cur - n * prev) / (n + 1.0);
        prev = cur;
        cur = next;
    }
    cur * ((2 * ell + 1) as f64).sqrt()
}

/// `xi_i = 1 / (2 sqrt(4 i^2 - 1))`, the off-diagonal entries of `X_s`.
pub fn xi(i: usize) -> f64 {
    let i = i as f64;
    0.5 / (4.0 * i * i - 1.0).sqrt()
}

/// `int_0^c P_ell(x) dx`.
///
/// Uses the three-term identity `int_0^c P_ell = xi_{ell+1} P_{ell+1}(c) - xi_ell P_{ell-1}(c)`
/// for `ell >= 1`, which follows from differentiating the Legendre recurrence.
pub fn shifted_legendre_integral(ell: usize, c: f64) -> f64 {
    if ell == 0 {
        return c;
    }
    xi(ell + 1) * shifted_legendre(ell + 1, c) - xi(ell) * shifted_legendre(ell - 1, c)
}

/// Nodes and weights of the `k`-point Gauss-Legendre rule on `[0, 1]`.
///
/// Golub-Welsch gives the starting nodes; each node is then polished with
/// Newton steps on the Legendre polynomial and the weights are recomputed
/// from the derivative formula, which is accurate to a few ulps.
pub fn gauss_legendre_rule(k: usize) -> Result<(DVector<f64>, DVector<f64>), TableauError> {
    if k == 0 {
        return Err(TableauError::EmptyRule);
    }
    let mut jacobi = DMatrix::<f64>::zeros(k, k);
    for n in 1..k {
        let nf = n as f64;
        let beta = nf / (4.0 * nf * nf - 1.0).sqrt();
        jacobi[(n - 1, n)] = beta;
        jacobi[(n, n - 1)] = beta;
    }
    let mut roots: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    roots.sort_by(|a, b| a.total_cmp(b));

    let mut nodes = DVector::zeros(k);
    let mut weights = DVector::zeros(k);
    for (i, &root) in roots.iter().enumerate() {
        let mut t = root;
        let mut dp = legendre_with_derivative(k, t).1;
        for _ in 0..3 {
            let (p, d) = legendre_with_derivative(k, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() <= 4.0 * f64::EPSILON * t.abs().max(1.0) {
                dp = legendre_with_derivative(k, t).1;
                break;
            }
        }
        nodes[i] = 0.5 * (t + 1.0);
        // weight on [-1, 1] is 2 / ((1 - t^2) P_k'(t)^2); halve for [0, 1]
        weights[i] = 1.0 / ((1.0 - t * t) * dp * dp);
    }
    Ok((nodes, weights))
}

/// Classical Legendre `P_n(t)` on `[-1, 1]` and its derivative.
fn legendre_with_derivative(n: usize, t: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 0..n {
        let j = j as f64;
        let next = ((2.0 * j + 1.0) * t * cur - j * prev) / (j + 1.0);
        prev = cur;
        cur = next;
    }
    let nf = n as f64;
    let deriv = if n == 0 { 0.0 } else { nf * (t * cur - prev) / (t * t - 1.0) };
    (cur, deriv)
}

/// All HBVM(k,s) coefficient matrices. Immutable once built.
#[derive(Debug, Clone)]
pub struct HbvmTableau {
    s: usize,
    k: usize,
    c: DVector<f64>,
    b: DVector<f64>,
    w: DMatrix<f64>,
    w_ext: DMatrix<f64>,
    i_mat: DMatrix<f64>,
    x: DMatrix<f64>,
    x_hat: DMatrix<f64>,
    xi: DVector<f64>,
    /// `B W`, the k x s weighting applied to stage evaluations.
    bw: DMatrix<f64>,
}

impl HbvmTableau {
    pub fn new(k: usize, s: usize) -> Result<Self, TableauError> {
        if s == 0 || k < s {
            return Err(TableauError::InvalidOrder { k, s });
        }
        let (c, b) = gauss_legendre_rule(k)?;
        let w_ext = DMatrix::from_fn(k, s + 1, |i, j| shifted_legendre(j, c[i]));
        let w = w_ext.columns(0, s).into_owned();
        let i_mat = DMatrix::from_fn(k, s, |i, j| shifted_legendre_integral(j, c[i]));
        let xi_vals = DVector::from_fn(s, |i, _| xi(i + 1));

        let mut x_hat = DMatrix::zeros(s + 1, s);
        x_hat[(0, 0)] = 0.5;
        for j in 0..s {
            if j + 1 < s {
                x_hat[(j, j + 1)] = -xi_vals[j];
            }
            x_hat[(j + 1, j)] = xi_vals[j];
        }
        let x = x_hat.rows(0, s).into_owned();
        let bw = DMatrix::from_fn(k, s, |i, j| b[i] * w[(i, j)]);

        Ok(Self { s, k, c, b, w, w_ext, i_mat, x, x_hat, xi: xi_vals, bw })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nodes(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.b
    }

    /// `W_s`, k x s, `W[i][j] = P_j(c_i)`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `W_{s+1}`, with the extra column needed to express `I_s`.
    pub fn w_ext(&self) -> &DMatrix<f64> {
        &self.w_ext
    }

    /// `I_s`, k x s, `I[i][j] = int_0^{c_i} P_j`.
    pub fn i_mat(&self) -> &DMatrix<f64> {
        &self.i_mat
    }

    /// Tridiagonal `X_s` with `1/2` in the corner, `-xi` above and `xi` below the diagonal.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn x_hat(&self) -> &DMatrix<f64> {
        &self.x_hat
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn bw(&self) -> &DMatrix<f64> {
        &self.bw
    }

    /// Butcher matrix `A = I_s W_s^T B` (k x k, rank s).
    pub fn butcher_a(&self) -> DMatrix<f64> {
        &self.i_mat * self.bw.transpose()
    }

    /// Numerical rank of `A` from its singular values, threshold `1e-10 * sigma_max`.
    pub fn butcher_rank(&self) -> usize {
        let sv = self.butcher_a().singular_values();
        let smax = sv.max();
        sv.iter().filter(|&&v| v > 1e-10 * smax).count()
    }
}
