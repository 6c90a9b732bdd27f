//! Sylvester equations `Z E + E R = U V^T` with a large, action-only `Z`.
//!
//! `R` is the small s x s coefficient coming from the tableau, `U V^T` is a
//! low-rank right-hand side. The solvers project onto a block Krylov space
//! built from `Z` (and optionally `Z^{-1}`) and `U`, solve the small projected
//! equation densely and lift the result back.

use nalgebra::{DMatrix, DVector, Schur};
use thiserror::Error;

/// Default cap on basis-growth iterations.
pub const DEFAULT_MAX_IT: usize = 100;

/// Relative norm below which a new candidate direction is considered dependent.
const DEFLATION_TOL: f64 = 1e-12;

/// Projected problems up to this many unknowns go through the Kronecker solve.
const KRONECKER_LIMIT: usize = 400;

#[derive(Debug, Error)]
pub enum SylvesterError {
    #[error("projected Sylvester problem is numerically singular (spectra of H and -R overlap)")]
    SingularProjectedProblem,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("projected problem too large for dense solve ({0} unknowns)")]
    TooLarge(usize),
    #[error("extended Krylov solve needs the inverse action of Z")]
    MissingInverse,
    #[error("Krylov solver did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, partial: Box<KrylovSolution> },
    #[error("true residual {actual:e} exceeds 1.1x the estimate {estimate:e}")]
    ResidualMismatch { estimate: f64, actual: f64 },
}

/// Action of a linear operator on a block of column vectors.
pub type BlockOperator<'a> = &'a dyn Fn(&DMatrix<f64>) -> DMatrix<f64>;

/// `Z E + E R = U V^T` with `Z` given by its action.
pub struct SylvesterProblem<'a> {
    pub apply_z: BlockOperator<'a>,
    pub apply_z_inverse: Option<BlockOperator<'a>>,
    pub r: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl<'a> SylvesterProblem<'a> {
    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn small_dim(&self) -> usize {
        self.r.nrows()
    }

    fn validate(&self) -> Result<(), SylvesterError> {
        let s = self.r.nrows();
        if self.r.ncols() != s {
            return Err(SylvesterError::DimensionMismatch("R must be square".into()));
        }
        if self.v.nrows() != s || self.v.ncols() != self.u.ncols() {
            return Err(SylvesterError::DimensionMismatch(format!(
                "U is {}x{}, V is {}x{}, R is {s}x{s}",
                self.u.nrows(),
                self.u.ncols(),
                self.v.nrows(),
                self.v.ncols()
            )));
        }
        if self.u.ncols() > s || s > self.dim() {
            return Err(SylvesterError::DimensionMismatch("need rank <= s <= dim".into()));
        }
        Ok(())
    }

    /// `||Z E + E R - U V^T||_F`, using `apply_z` once per column of `E`.
    pub fn residual_norm(&self, e: &DMatrix<f64>) -> f64 {
        let mut res = (self.apply_z)(e);
        res += e * &self.r;
        res -= &self.u * self.v.transpose();
        res.norm()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KrylovStats {
    pub iterations: usize,
    pub basis_size: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub breakdown: bool,
}

/// Factored solution `E = V Y` with orthonormal `V`.
#[derive(Debug, Clone)]
pub struct KrylovSolution {
    pub basis: DMatrix<f64>,
    pub coeffs: DMatrix<f64>,
    pub stats: KrylovStats,
}

impl KrylovSolution {
    pub fn solution(&self) -> DMatrix<f64> {
        &self.basis * &self.coeffs
    }

    pub fn residual_estimate(&self) -> f64 {
        self.stats.residual_history.last().copied().unwrap_or(0.0)
    }
}

/// Solve `H Y + Y R = C` for small dense matrices.
pub fn solve_sylvester_dense(
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SylvesterError> {
    let (p, q) = (h.nrows(), r.nrows());
    if h.ncols() != p || r.ncols() != q || c.shape() != (p, q) {
        return Err(SylvesterError::DimensionMismatch(format!(
            "H {:?}, R {:?}, C {:?}",
            h.shape(),
            r.shape(),
            c.shape()
        )));
    }
    if p * q > 40_000 {
        return Err(SylvesterError::TooLarge(p * q));
    }
    let y = if p * q <= KRONECKER_LIMIT { kronecker_solve(h, r, c)? } else { schur_solve(h, r, c)? };
    if !y.iter().all(|v| v.is_finite()) {
        return Err(SylvesterError::SingularProjectedProblem);
    }
    let resid = (h * &y + &y * r - c).norm();
    let scale = h.norm() * y.norm() + y.norm() * r.norm() + c.norm();
    if resid > 1e-10 * scale {
        return Err(SylvesterError::SingularProjectedProblem);
    }
    Ok(y)
}

/// `(I_q (x) H + R^T (x) I_p) vec(Y) = vec(C)`.
fn kronecker_solve(h: &DMatrix<f64>, r: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, SylvesterError> {
    let (p, q) = (h.nrows(), r.nrows());
    let n = p * q;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..q {
        k.view_mut((j * p, j * p), (p, p)).copy_from(h);
        for i in 0..q {
            let rij = r[(i, j)];
            if rij != 0.0 {
                for d in 0..p {
                    k[(j * p + d, i * p + d)] += rij;
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = k.lu().solve(&rhs).ok_or(SylvesterError::SingularProjectedProblem)?;
    Ok(DMatrix::from_column_slice(p, q, sol.as_slice()))
}

/// Real Schur form of the small `R`, then column-by-column (or 2-column) shifted solves with `H`.
fn schur_solve(h: &DMatrix<f64>, r: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, SylvesterError> {
    let (p, q) = (h.nrows(), r.nrows());
    let (qmat, t) = Schur::new(r.clone()).unpack();
    let ct = c * &qmat;
    let mut yt = DMatrix::<f64>::zeros(p, q);
    let mut j = 0;
    while j < q {
        let pair = j + 1 < q && t[(j + 1, j)].abs() > f64::EPSILON * (t[(j, j)].abs() + t[(j + 1, j + 1)].abs());
        let width = if pair { 2 } else { 1 };
        let mut rhs = ct.columns(j, width).into_owned();
        for i in 0..j {
            for w in 0..width {
                let tij = t[(i, j + w)];
                if tij != 0.0 {
                    rhs.column_mut(w).axpy(-tij, &yt.column(i), 1.0);
                }
            }
        }
        if pair {
            let mut block = DMatrix::zeros(2 * p, 2 * p);
            block.view_mut((0, 0), (p, p)).copy_from(h);
            block.view_mut((p, p), (p, p)).copy_from(h);
            for d in 0..p {
                block[(d, d)] += t[(j, j)];
                block[(p + d, p + d)] += t[(j + 1, j + 1)];
                block[(d, p + d)] += t[(j + 1, j)];
                block[(p + d, d)] += t[(j, j + 1)];
            }
            let stacked = DVector::from_column_slice(rhs.as_slice());
            let sol = block.lu().solve(&stacked).ok_or(SylvesterError::SingularProjectedProblem)?;
            yt.column_mut(j).copy_from(&sol.rows(0, p));
            yt.column_mut(j + 1).copy_from(&sol.rows(p, p));
        } else {
            let mut shifted = h.clone();
            for d in 0..p {
                shifted[(d, d)] += t[(j, j)];
            }
            let sol = shifted.lu().solve(&rhs.column(0).into_owned()).ok_or(SylvesterError::SingularProjectedProblem)?;
            yt.column_mut(j).copy_from(&sol);
        }
        j += width;
    }
    Ok(yt * qmat.transpose())
}

/// Orthonormal basis under construction, together with `Z` applied to every vector.
struct ProjectedBasis {
    vectors: Vec<DVector<f64>>,
    z_vectors: Vec<DVector<f64>>,
    /// `V^T Z V`, grown block by block.
    projected: DMatrix<f64>,
}

impl ProjectedBasis {
    fn new() -> Self {
        Self { vectors: Vec::new(), z_vectors: Vec::new(), projected: DMatrix::zeros(0, 0) }
    }

    fn len(&self) -> usize {
        self.vectors.len()
    }

    /// Orthogonalize `candidates` against the basis and each other. Returns
    /// the accepted orthonormal vectors, the coefficient matrix `tau` with
    /// `(I - V V^T) candidates = Q tau` (Q the accepted vectors), and the
    /// number of accepted vectors after each candidate column.
    fn orthogonalize(&self, candidates: &DMatrix<f64>) -> (Vec<DVector<f64>>, DMatrix<f64>, Vec<usize>) {
        let mut accepted: Vec<DVector<f64>> = Vec::new();
        let mut tau_cols: Vec<Vec<f64>> = Vec::with_capacity(candidates.ncols());
        let mut prefix = Vec::with_capacity(candidates.ncols());
        for col in candidates.column_iter() {
            let mut w = col.into_owned();
            let original = w.norm();
            let mut coeffs = vec![0.0; accepted.len() + 1];
            if original > 0.0 {
                let mut before = original;
                for _pass in 0..2 {
                    for v in self.vectors.iter() {
                        let hij = v.dot(&w);
                        w.axpy(-hij, v, 1.0);
                    }
                    for (idx, q) in accepted.iter().enumerate() {
                        let hij = q.dot(&w);
                        w.axpy(-hij, q, 1.0);
                        coeffs[idx] += hij;
                    }
                    let after = w.norm();
                    if after > before * std::f64::consts::FRAC_1_SQRT_2 {
                        break;
                    }
                    before = after;
                }
                let norm = w.norm();
                if norm > DEFLATION_TOL * original {
                    coeffs[accepted.len()] = norm;
                    accepted.push(w / norm);
                }
            }
            tau_cols.push(coeffs);
            prefix.push(accepted.len());
        }
        let mut tau = DMatrix::zeros(accepted.len(), candidates.ncols());
        for (j, col) in tau_cols.into_iter().enumerate() {
            for (i, val) in col.into_iter().enumerate().take(accepted.len()) {
                tau[(i, j)] = val;
            }
        }
        (accepted, tau, prefix)
    }

    /// Append orthonormal vectors, applying `Z` to them and extending `V^T Z V`.
    fn push_block(&mut self, block: Vec<DVector<f64>>, apply_z: BlockOperator<'_>) {
        if block.is_empty() {
            return;
        }
        let old = self.len();
        let as_mat = DMatrix::from_columns(&block);
        let z_block = apply_z(&as_mat);
        self.vectors.extend(block);
        self.z_vectors.extend(z_block.column_iter().map(|c| c.into_owned()));
        let new = self.len();
        let mut t = DMatrix::zeros(new, new);
        t.view_mut((0, 0), (old, old)).copy_from(&self.projected);
        for j in 0..new {
            for i in 0..new {
                if i < old && j < old {
                    continue;
                }
                t[(i, j)] = self.vectors[i].dot(&self.z_vectors[j]);
            }
        }
        self.projected = t;
    }

    fn matrix(&self) -> DMatrix<f64> {
        if self.vectors.is_empty() {
            return DMatrix::zeros(0, 0);
        }
        DMatrix::from_columns(&self.vectors)
    }

    fn project(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), u.ncols(), |i, j| self.vectors[i].dot(&u.column(j)))
    }

    fn z_times_coeffs(&self, range: std::ops::Range<usize>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = self.vectors[0].len();
        let mut out = DMatrix::zeros(dim, y.ncols());
        for i in range {
            for j in 0..y.ncols() {
                out.column_mut(j).axpy(y[(i, j)], &self.z_vectors[i], 1.0);
            }
        }
        out
    }

    fn remove_component(&self, m: &mut DMatrix<f64>) {
        for mut col in m.column_iter_mut() {
            for v in self.vectors.iter() {
                let c = v.dot(&col);
                col.axpy(-c, v, 1.0);
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    Polynomial,
    Extended,
}

/// One-sided projection onto the (block) polynomial Krylov space `K_j(Z, U)`.
///
/// For a rank-one right-hand side this is the classical Arnoldi-based scheme:
/// modified Gram-Schmidt, projected solve with `H_j`, and the residual bound
/// `|h_{j+1,j}| ||e_j^T Y_j||`. Wider `U` is handled as block Arnoldi.
pub fn krylov_sylvester_poly(
    prob: &SylvesterProblem<'_>,
    tol: f64,
    max_it: usize,
) -> Result<KrylovSolution, SylvesterError> {
    krylov_sylvester(prob, tol, max_it, Variant::Polynomial)
}

/// Projection onto the extended Krylov space `span{U, Z^-1 U, Z U, Z^-2 U, ...}`.
///
/// Each iteration adds `Z` applied to the "positive" half of the newest block
/// and `Z^{-1}` applied to its "negative" half. Dependent directions are
/// deflated. The residual estimate is verified against the true residual
/// before returning.
pub fn krylov_sylvester_extended(
    prob: &SylvesterProblem<'_>,
    tol: f64,
    max_it: usize,
) -> Result<KrylovSolution, SylvesterError> {
    if prob.apply_z_inverse.is_none() {
        return Err(SylvesterError::MissingInverse);
    }
    krylov_sylvester(prob, tol, max_it, Variant::Extended)
}

fn krylov_sylvester(
    prob: &SylvesterProblem<'_>,
    tol: f64,
    max_it: usize,
    variant: Variant,
) -> Result<KrylovSolution, SylvesterError> {
    prob.validate()?;
    let dim = prob.dim();
    let s = prob.small_dim();
    let target = tol * prob.u.norm() * prob.v.norm();
    let mut stats = KrylovStats::default();

    if target == 0.0 {
        stats.converged = true;
        return Ok(KrylovSolution { basis: DMatrix::zeros(dim, 0), coeffs: DMatrix::zeros(0, s), stats });
    }

    let mut basis = ProjectedBasis::new();
    // initial block and the split between "Z" and "Z^-1" directions
    let (mut block, mut plus_width) = match variant {
        Variant::Polynomial => {
            let (q, _, _) = basis.orthogonalize(&prob.u);
            let n = q.len();
            (q, n)
        }
        Variant::Extended => {
            let z_inv = prob.apply_z_inverse.expect("checked by caller");
            let r = prob.u.ncols();
            let mut stacked = DMatrix::zeros(dim, 2 * r);
            stacked.columns_mut(0, r).copy_from(&prob.u);
            stacked.columns_mut(r, r).copy_from(&z_inv(&prob.u));
            let (q, _, prefix) = basis.orthogonalize(&stacked);
            (q, prefix[r - 1])
        }
    };

    let mut coeffs;
    loop {
        let start = basis.len();
        basis.push_block(std::mem::take(&mut block), prob.apply_z);
        let end = basis.len();
        stats.iterations += 1;

        let rhs = basis.project(&prob.u) * prob.v.transpose();
        coeffs = solve_sylvester_dense(&basis.projected, &prob.r, &rhs)?;
        let y_new = coeffs.rows(start, end - start).into_owned();

        // candidates for the next block
        let mut n_plus_candidates = end - start;
        let next_candidates = match variant {
            Variant::Polynomial => DMatrix::from_columns(&basis.z_vectors[start..end]),
            Variant::Extended => {
                let z_inv = prob.apply_z_inverse.expect("checked by caller");
                let plus_end = start + plus_width;
                let minus = if plus_end < end {
                    z_inv(&DMatrix::from_columns(&basis.vectors[plus_end..end]))
                } else {
                    DMatrix::zeros(dim, 0)
                };
                let n_plus = plus_end - start;
                n_plus_candidates = n_plus;
                let mut cand = DMatrix::zeros(dim, n_plus + minus.ncols());
                for (c, i) in (start..plus_end).enumerate() {
                    cand.column_mut(c).copy_from(&basis.z_vectors[i]);
                }
                cand.columns_mut(n_plus, minus.ncols()).copy_from(&minus);
                cand
            }
        };
        let (next, tau, prefix) = basis.orthogonalize(&next_candidates);

        let estimate = match variant {
            Variant::Polynomial => (&tau * &y_new).norm(),
            Variant::Extended => {
                let mut leak = basis.z_times_coeffs(start..end, &coeffs);
                basis.remove_component(&mut leak);
                leak.norm()
            }
        };
        stats.residual_history.push(estimate);
        stats.basis_size = basis.len();

        let breakdown = next.is_empty() || basis.len() >= dim;
        if estimate < target || breakdown {
            stats.breakdown = breakdown && estimate >= target;
            stats.converged = true;
            break;
        }
        if stats.iterations >= max_it {
            let partial = KrylovSolution { basis: basis.matrix(), coeffs, stats };
            return Err(SylvesterError::NotConverged {
                iterations: partial.stats.iterations,
                residual: estimate,
                partial: Box::new(partial),
            });
        }
        // accepted vectors come out in candidate order, the plus half first
        plus_width = if n_plus_candidates == 0 { 0 } else { prefix[n_plus_candidates - 1] };
        block = next;
    }

    let solution = KrylovSolution { basis: basis.matrix(), coeffs, stats };
    if variant == Variant::Extended {
        let actual = prob.residual_norm(&solution.solution());
        let estimate = solution.residual_estimate();
        if actual > 1.1 * estimate && actual > target {
            return Err(SylvesterError::ResidualMismatch { estimate, actual });
        }
    }
    Ok(solution)
}

/// Minimal-rank factorization `M ~ F1 F2^T` with `||M - F1 F2^T||_F <= rel_tol ||M||_F`.
#[derive(Debug, Clone)]
pub struct LowRankFactors {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.left.ncols()
    }
}

pub fn lowrank_factor(m: &DMatrix<f64>, rel_tol: f64) -> LowRankFactors {
    let (rows, cols) = m.shape();
    let total = m.norm();
    if total == 0.0 || cols == 0 {
        return LowRankFactors { left: DMatrix::zeros(rows, 0), right: DMatrix::zeros(cols, 0) };
    }
    // thin QR first so the SVD only sees the small triangular factor
    let (q, r_small) = if rows > cols {
        let qr = m.clone().qr();
        (qr.q(), qr.r())
    } else {
        (DMatrix::identity(rows, rows), m.clone())
    };
    let svd = r_small.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sigma = svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    // smallest r whose discarded tail stays under the tolerance
    let mut tail: f64 = sigma.iter().map(|v| v * v).sum();
    let budget = (rel_tol * total).powi(2);
    let mut rank = 0;
    while rank < order.len() && tail > budget {
        tail -= sigma[order[rank]].powi(2);
        rank += 1;
    }
    let mut left = DMatrix::zeros(rows, rank);
    let mut right = DMatrix::zeros(cols, rank);
    for (c, &idx) in order.iter().take(rank).enumerate() {
        left.column_mut(c).copy_from(&(&q * u.column(idx) * sigma[idx]));
        right.column_mut(c).copy_from(&vt.row(idx).transpose());
    }
    LowRankFactors { left, right }
}
