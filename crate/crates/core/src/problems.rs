//! Hamiltonian test problems: finite-difference semi-discretizations of the
//! 1D linear and semilinear wave equations with homogeneous Dirichlet data.
//!
//! The state is `y = (u; p)` with `m = N - 1` interior unknowns each, the
//! canonical structure matrix is `[[0, I], [-I, 0]]`, and
//! `H(u, p) = p.p/2 - u.L_N u/2 + sum_j f(u_j)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("grid parameter N must be at least 3, got {0}")]
    GridTooCoarse(usize),
    #[error("domain length must be positive, got {0}")]
    BadLength(f64),
    #[error("tridiagonal factorization hit a zero pivot at row {0}")]
    SingularJacobian(usize),
    #[error("dense Jacobian is singular")]
    SingularMatrix,
    #[error("Hessian must be square with even, positive dimension, got {0}")]
    BadDimension(usize),
}

/// Frozen Jacobian `J_f` at some state, with its action and inverse action.
pub trait JacobianOperator: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    fn solve(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

/// `y' = J grad H(y)` on R^{2m}.
pub trait HamiltonianProblem: Send + Sync {
    fn dim(&self) -> usize;

    fn rhs(&self, y: &DVector<f64>) -> DVector<f64>;

    /// Right-hand side applied to every column of `ys`.
    fn rhs_columns(&self, ys: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(ys.nrows(), ys.ncols());
        for (j, col) in ys.column_iter().enumerate() {
            out.column_mut(j).copy_from(&self.rhs(&col.into_owned()));
        }
        out
    }

    fn hamiltonian(&self, y: &DVector<f64>) -> f64;

    /// `df/dy` at `y`, factored for solves.
    fn frozen_jacobian(&self, y: &DVector<f64>) -> Result<Box<dyn JacobianOperator>, ProblemError>;

    fn is_linear(&self) -> bool;

    /// `G` for problems with `f(y) = G y`.
    fn linear_operator(&self) -> Option<Box<dyn JacobianOperator>> {
        None
    }
}

pub fn hamiltonian_series(problem: &dyn HamiltonianProblem, snapshots: &[DVector<f64>]) -> Vec<f64> {
    snapshots.iter().map(|y| problem.hamiltonian(y)).collect()
}

/// Symmetric tridiagonal matrix stored by diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub diag: Vec<f64>,
    /// `off[i]` couples rows `i` and `i + 1`.
    pub off: Vec<f64>,
}

impl Tridiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * x[i + 1];
            }
            out[i] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if i + 1 == j {
                self.off[i]
            } else if j + 1 == i {
                self.off[j]
            } else {
                0.0
            }
        })
    }

    /// Thomas factorization (no pivoting).
    pub fn factor(&self) -> Result<TridiagonalLu, ProblemError> {
        let n = self.len();
        let mut pivots = vec![0.0; n];
        let mut mult = vec![0.0; n.saturating_sub(1)];
        let scale = self.diag.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        pivots[0] = self.diag[0];
        for i in 1..n {
            if pivots[i - 1].abs() <= f64::EPSILON * scale {
                return Err(ProblemError::SingularJacobian(i - 1));
            }
            mult[i - 1] = self.off[i - 1] / pivots[i - 1];
            pivots[i] = self.diag[i] - mult[i - 1] * self.off[i - 1];
        }
        if pivots[n - 1].abs() <= f64::EPSILON * scale {
            return Err(ProblemError::SingularJacobian(n - 1));
        }
        Ok(TridiagonalLu { pivots, mult, off: self.off.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    pivots: Vec<f64>,
    mult: Vec<f64>,
    off: Vec<f64>,
}

impl TridiagonalLu {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.pivots.len();
        for i in 1..n {
            x[i] -= self.mult[i - 1] * x[i - 1];
        }
        x[n - 1] /= self.pivots[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (x[i] - self.off[i] * x[i + 1]) / self.pivots[i];
        }
    }
}

/// Uniform interior grid for homogeneous Dirichlet problems.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveGrid {
    pub n: usize,
    /// Left end of the domain.
    pub start: f64,
    /// Total length of the domain.
    pub length: f64,
    pub dx: f64,
    pub x_nodes: Vec<f64>,
}

impl WaveGrid {
    pub fn new(n: usize, start: f64, length: f64) -> Result<Self, ProblemError> {
        if n < 3 {
            return Err(ProblemError::GridTooCoarse(n));
        }
        if length.is_nan() || length <= 0.0 {
            return Err(ProblemError::BadLength(length));
        }
        let dx = length / n as f64;
        let x_nodes = (1..n).map(|j| start + j as f64 * dx).collect();
        Ok(Self { n, start, length, dx, x_nodes })
    }

    pub fn interior(&self) -> usize {
        self.n - 1
    }

    /// `L_N = tridiag(1, -2, 1) / dx^2`.
    pub fn laplacian(&self) -> Tridiagonal {
        let m = self.interior();
        let inv = 1.0 / (self.dx * self.dx);
        Tridiagonal { diag: vec![-2.0 * inv; m], off: vec![inv; m - 1] }
    }
}

/// Local potential `f` with derivatives, entering as `-f'(u)` in the momentum equation.
#[derive(Debug, Clone, Copy)]
pub struct Potential {
    pub f: fn(f64) -> f64,
    pub fprime: fn(f64) -> f64,
    pub fsecond: fn(f64) -> f64,
}

impl Potential {
    /// `f'(u) = 10 u^2`.
    pub fn cubic() -> Self {
        Self { f: |u| 10.0 / 3.0 * u * u * u, fprime: |u| 10.0 * u * u, fsecond: |u| 20.0 * u }
    }
}

impl Default for Potential {
    fn default() -> Self {
        Self::cubic()
    }
}

/// Semi-discrete wave equation `u' = p`, `p' = L_N u - f'(u)`.
#[derive(Debug, Clone)]
pub struct WaveProblem {
    grid: WaveGrid,
    laplacian: Tridiagonal,
    potential: Option<Potential>,
}

/// Linear wave equation on `[0, length]`.
pub fn build_linear_wave(n: usize, length: f64) -> Result<WaveProblem, ProblemError> {
    let grid = WaveGrid::new(n, 0.0, length)?;
    let laplacian = grid.laplacian();
    Ok(WaveProblem { grid, laplacian, potential: None })
}

/// Semilinear wave equation on `(-half_width, half_width)`.
pub fn build_semilinear_wave(n: usize, half_width: f64, potential: Potential) -> Result<WaveProblem, ProblemError> {
    if half_width.is_nan() || half_width <= 0.0 {
        return Err(ProblemError::BadLength(half_width));
    }
    let grid = WaveGrid::new(n, -half_width, 2.0 * half_width)?;
    let laplacian = grid.laplacian();
    Ok(WaveProblem { grid, laplacian, potential: Some(potential) })
}

impl WaveProblem {
    pub fn grid(&self) -> &WaveGrid {
        &self.grid
    }

    pub fn laplacian(&self) -> &Tridiagonal {
        &self.laplacian
    }

    pub fn potential(&self) -> Option<&Potential> {
        self.potential.as_ref()
    }

    /// `(psi0(x_j); psi1(x_j))` on the interior nodes.
    pub fn initial_state(&self, psi0: impl Fn(f64) -> f64, psi1: impl Fn(f64) -> f64) -> DVector<f64> {
        let m = self.grid.interior();
        DVector::from_fn(2 * m, |i, _| if i < m { psi0(self.grid.x_nodes[i]) } else { psi1(self.grid.x_nodes[i - m]) })
    }

    fn jacobian_at(&self, u: &[f64]) -> Result<WaveJacobian, ProblemError> {
        let mut block = self.laplacian.clone();
        if let Some(pot) = &self.potential {
            for (d, &ui) in block.diag.iter_mut().zip(u) {
                *d -= (pot.fsecond)(ui);
            }
        }
        let lu = block.factor()?;
        Ok(WaveJacobian { block, lu })
    }
}

impl HamiltonianProblem for WaveProblem {
    fn dim(&self) -> usize {
        2 * self.grid.interior()
    }

    fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
        let m = self.grid.interior();
        let (u, p) = y.as_slice().split_at(m);
        let mut out = DVector::zeros(2 * m);
        out.as_mut_slice()[..m].copy_from_slice(p);
        self.laplacian.apply(u, &mut out.as_mut_slice()[m..]);
        if let Some(pot) = &self.potential {
            for (o, &ui) in out.as_mut_slice()[m..].iter_mut().zip(u) {
                *o -= (pot.fprime)(ui);
            }
        }
        out
    }

    fn hamiltonian(&self, y: &DVector<f64>) -> f64 {
        let m = self.grid.interior();
        let (u, p) = y.as_slice().split_at(m);
        let mut lu = vec![0.0; m];
        self.laplacian.apply(u, &mut lu);
        let kinetic: f64 = p.iter().map(|v| v * v).sum::<f64>() * 0.5;
        let elastic: f64 = -0.5 * u.iter().zip(&lu).map(|(a, b)| a * b).sum::<f64>();
        let local: f64 = match &self.potential {
            Some(pot) => u.iter().map(|&v| (pot.f)(v)).sum(),
            None => 0.0,
        };
        kinetic + elastic + local
    }

    fn frozen_jacobian(&self, y: &DVector<f64>) -> Result<Box<dyn JacobianOperator>, ProblemError> {
        let m = self.grid.interior();
        Ok(Box::new(self.jacobian_at(&y.as_slice()[..m])?))
    }

    fn is_linear(&self) -> bool {
        self.potential.is_none()
    }

    fn linear_operator(&self) -> Option<Box<dyn JacobianOperator>> {
        if self.potential.is_some() {
            return None;
        }
        let zeros = vec![0.0; self.grid.interior()];
        self.jacobian_at(&zeros).ok().map(|j| Box::new(j) as Box<dyn JacobianOperator>)
    }
}

/// `[[0, I], [M, 0]]` with tridiagonal `M = L_N - diag(f''(u))`.
struct WaveJacobian {
    block: Tridiagonal,
    lu: TridiagonalLu,
}

impl JacobianOperator for WaveJacobian {
    fn dim(&self) -> usize {
        2 * self.block.len()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.block.len();
        let mut out = DMatrix::zeros(2 * m, x.ncols());
        for (src, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
            let (a, b) = src.as_slice().split_at(m);
            let d = dst.as_mut_slice();
            d[..m].copy_from_slice(b);
            self.block.apply(a, &mut d[m..]);
        }
        out
    }

    fn solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.block.len();
        let mut out = DMatrix::zeros(2 * m, x.ncols());
        for (src, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
            let (c, d) = src.as_slice().split_at(m);
            let o = dst.as_mut_slice();
            o[..m].copy_from_slice(d);
            self.lu.solve_in_place(&mut o[..m]);
            o[m..].copy_from_slice(c);
        }
        out
    }
}

/// Quadratic Hamiltonian `H(y) = y.S y / 2` with `f(y) = J S y` and the
/// canonical `J = [[0, I], [-I, 0]]`; dense, for small systems.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    hessian: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl QuadraticProblem {
    /// `hessian` must be symmetric with even dimension.
    pub fn new(hessian: DMatrix<f64>) -> Result<Self, ProblemError> {
        let n = hessian.nrows();
        if n == 0 || n % 2 != 0 || hessian.ncols() != n {
            return Err(ProblemError::BadDimension(n));
        }
        let m = n / 2;
        let mut g = DMatrix::zeros(n, n);
        g.rows_mut(0, m).copy_from(&hessian.rows(m, m));
        g.rows_mut(m, m).copy_from(&(-hessian.rows(0, m)));
        Ok(Self { hessian, g })
    }

    /// `q' = p, p' = -q`.
    pub fn harmonic_oscillator() -> Self {
        Self::new(DMatrix::identity(2, 2)).expect("2x2 identity is a valid Hessian")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }
}

struct DenseJacobian {
    g: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseJacobian {
    fn new(g: &DMatrix<f64>) -> Result<Self, ProblemError> {
        let lu = g.clone().lu();
        if !lu.is_invertible() {
            return Err(ProblemError::SingularMatrix);
        }
        Ok(Self { g: g.clone(), lu })
    }
}

impl JacobianOperator for DenseJacobian {
    fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.g * x
    }

    fn solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(x).expect("factorization checked at construction")
    }
}

impl HamiltonianProblem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.g * y
    }

    fn rhs_columns(&self, ys: &DMatrix<f64>) -> DMatrix<f64> {
        &self.g * ys
    }

    fn hamiltonian(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.hessian * y))
    }

    fn frozen_jacobian(&self, _y: &DVector<f64>) -> Result<Box<dyn JacobianOperator>, ProblemError> {
        Ok(Box::new(DenseJacobian::new(&self.g)?))
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn linear_operator(&self) -> Option<Box<dyn JacobianOperator>> {
        DenseJacobian::new(&self.g).ok().map(|j| Box::new(j) as Box<dyn JacobianOperator>)
    }
}

/// `exp(-100 (x - center)^2)`.
pub fn gaussian_pulse(center: f64) -> impl Fn(f64) -> f64 {
    move |x| (-100.0 * (x - center) * (x - center)).exp()
}
