//! Time stepping with HBVM(k,s).

mod controller;
mod stepper;

use nalgebra::DVector;
use thiserror::Error;

use crate::matrix_equations::{SylvesterError, DEFAULT_MAX_IT};
use crate::newton_krylov::{ForcingParams, DEFAULT_FGMRES_MAX_IT};
use crate::problems::{HamiltonianProblem, ProblemError};
use crate::tableau::HbvmTableau;

pub use controller::{adapt_timestep, StepController};
use stepper::{linear_step_increment, newton_krylov_step_increment, simplified_newton_step_increment};
pub use stepper::{
    apply_stage_preconditioner, eval_residual, fixed_point_warmup, linear_step, newton_krylov_step,
    simplified_newton_step, solve_stage_equation, stage_points, WarmupStats,
};

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("stage residual contains non-finite entries")]
    NonFiniteResidual,
    #[error("the linear stepper needs a problem of the form f(y) = G y")]
    NotLinear,
    #[error("matrix equation solver failed: {0}")]
    SolverFailure(#[from] SylvesterError),
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDidNotConverge { iterations: usize, residual: f64 },
    #[error("FGMRES broke down after {iterations} iterations (residual {residual:e})")]
    LinearSolverFailure { iterations: usize, residual: f64 },
    #[error("step size {h:e} cannot be halved below h_min = {h_min:e}")]
    StepSizeUnderflow { h: f64, h_min: f64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid integration settings: {0}")]
    InvalidSettings(String),
}

impl IntegratorError {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::NonFiniteResidual => "non_finite_residual",
            Self::NotLinear => "not_linear",
            Self::SolverFailure(_) => "solver_failure",
            Self::NewtonDidNotConverge { .. } => "newton_did_not_converge",
            Self::LinearSolverFailure { .. } => "linear_solver_failure",
            Self::StepSizeUnderflow { .. } => "step_size_underflow",
            Self::Problem(_) => "problem",
            Self::InvalidSettings(_) => "invalid_settings",
        }
    }

    /// Whether retrying the step with a smaller `h` can help.
    fn is_retryable(&self) -> bool {
        !matches!(self, Self::NotLinear | Self::InvalidSettings(_) | Self::StepSizeUnderflow { .. })
    }
}

/// How the stage equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    /// One matrix equation per step; requires `f(y) = G y`.
    Linear,
    /// Newton with the Jacobian frozen at `y_n`.
    SimplifiedNewton,
    /// Inexact Newton with FGMRES and a matrix-equation preconditioner.
    NewtonKrylov,
}

/// Projection space of the matrix-equation solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixSolver {
    Polynomial,
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub matrix_solver: MatrixSolver,
    pub matrix_tol: f64,
    pub matrix_max_it: usize,
    pub newton_abs: f64,
    pub newton_rel: f64,
    pub max_newton: usize,
    pub forcing: ForcingParams,
    pub fgmres_max_it: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            matrix_solver: MatrixSolver::Extended,
            matrix_tol: 1e-10,
            matrix_max_it: DEFAULT_MAX_IT,
            newton_abs: 1e-8,
            newton_rel: 1e-10,
            max_newton: 100,
            forcing: ForcingParams::default(),
            fgmres_max_it: DEFAULT_FGMRES_MAX_IT,
        }
    }
}

/// Per-step record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub step_index: usize,
    /// Time at the end of the step.
    pub time: f64,
    pub h_used: f64,
    pub newton_iters: usize,
    pub warmup_iters: usize,
    pub warmup_halvings: usize,
    pub fgmres_iters_per_newton: Vec<usize>,
    /// Relative FGMRES tolerance (forcing term) of each Newton iteration.
    pub fgmres_targets: Vec<f64>,
    pub fgmres_residuals: Vec<f64>,
    /// Matrix-equation iterations per Newton iteration (summed over
    /// preconditioner applications for Newton-Krylov).
    pub matrix_eq_iters: Vec<usize>,
    /// `||F||_F` before the first and after every Newton iteration.
    pub newton_residuals: Vec<f64>,
    pub residual_final: f64,
    pub energy: f64,
    /// Step-size halvings spent before this step was accepted.
    pub halvings_this_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationSettings {
    pub t_end: f64,
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub stepper: Stepper,
    /// Keep every `snapshot_stride`-th state; 0 keeps only the endpoints.
    pub snapshot_stride: usize,
    pub solver: SolverOptions,
}

impl IntegrationSettings {
    /// `h_max = h0` and `h_min = h0 / 1024`.
    pub fn new(t_end: f64, h0: f64, stepper: Stepper) -> Self {
        Self {
            t_end,
            h0,
            h_min: h0 / 1024.0,
            h_max: h0,
            stepper,
            snapshot_stride: 0,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), IntegratorError> {
        let mut problems = Vec::new();
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            problems.push(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.h0.is_finite() && self.h0 > 0.0) {
            problems.push(format!("h0 must be positive, got {}", self.h0));
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h0 && self.h0 <= self.h_max) {
            problems.push(format!("need 0 < h_min <= h0 <= h_max, got {} / {} / {}", self.h_min, self.h0, self.h_max));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(IntegratorError::InvalidSettings(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepStats>,
    /// Energy of the initial state.
    pub initial_energy: f64,
    /// `(t, y)` pairs, including the initial state.
    pub snapshots: Vec<(f64, DVector<f64>)>,
    pub final_time: f64,
    pub final_state: DVector<f64>,
}

impl Trajectory {
    /// `max_n |H(y_n) - H(y_0)|` over accepted steps.
    pub fn max_energy_drift(&self) -> f64 {
        self.steps.iter().map(|s| (s.energy - self.initial_energy).abs()).fold(0.0, f64::max)
    }
}

/// Outcome of [`integrate`]: the accepted part of the trajectory plus the
/// error that stopped it early, if any.
#[derive(Debug)]
pub struct IntegrationResult {
    pub trajectory: Trajectory,
    pub error: Option<IntegratorError>,
}

impl IntegrationResult {
    pub fn into_result(self) -> Result<Trajectory, IntegratorError> {
        match self.error {
            None => Ok(self.trajectory),
            Some(e) => Err(e),
        }
    }
}

/// One step with the chosen stepper.
pub fn step(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    stepper: Stepper,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, StepStats), IntegratorError> {
    match stepper {
        Stepper::Linear => linear_step(problem, tableau, y_n, h, opts),
        Stepper::SimplifiedNewton => simplified_newton_step(problem, tableau, y_n, h, opts),
        Stepper::NewtonKrylov => newton_krylov_step(problem, tableau, y_n, h, opts),
    }
}

fn step_increment(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y_n: &DVector<f64>,
    h: f64,
    stepper: Stepper,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, StepStats), IntegratorError> {
    match stepper {
        Stepper::Linear => linear_step_increment(problem, tableau, y_n, h, opts),
        Stepper::SimplifiedNewton => simplified_newton_step_increment(problem, tableau, y_n, h, opts),
        Stepper::NewtonKrylov => newton_krylov_step_increment(problem, tableau, y_n, h, opts),
    }
}

/// Integrate from `t = 0` to `t_end`. The final step is shortened so the
/// step sizes sum to `t_end` exactly. State updates use compensated
/// summation so round-off does not swamp high-order truncation errors.
pub fn integrate(
    problem: &dyn HamiltonianProblem,
    tableau: &HbvmTableau,
    y0: &DVector<f64>,
    settings: &IntegrationSettings,
) -> IntegrationResult {
    let mut traj = Trajectory {
        initial_energy: problem.hamiltonian(y0),
        snapshots: vec![(0.0, y0.clone())],
        final_state: y0.clone(),
        ..Default::default()
    };
    if let Err(e) = settings.validate() {
        return IntegrationResult { trajectory: traj, error: Some(e) };
    }
    if y0.len() != problem.dim() {
        let e = IntegratorError::InvalidSettings(format!("state has length {}, problem has {}", y0.len(), problem.dim()));
        return IntegrationResult { trajectory: traj, error: Some(e) };
    }

    let mut ctrl = StepController::new(settings.h0, settings.h_min, settings.h_max);
    // t is accumulated with compensation too: a drifting clock would make the
    // clamped final step absorb the round-off and shift the end time.
    let (mut t, mut t_carry) = (0.0, 0.0);
    let mut y = y0.clone();
    let mut carry = DVector::zeros(y0.len());
    let end_slack = 1e-14 * settings.t_end.max(1.0);
    let mut error = None;

    while (settings.t_end - t) + t_carry > end_slack {
        let remaining = (settings.t_end - t) + t_carry;
        let h = if ctrl.h >= remaining - end_slack { remaining } else { ctrl.h };
        match step_increment(problem, tableau, &y, h, settings.stepper, &settings.solver) {
            Ok((inc, mut stats)) => {
                if h == remaining {
                    (t, t_carry) = (settings.t_end, 0.0);
                } else {
                    kahan_add(&mut t, &mut t_carry, h);
                }
                compensated_add(&mut y, &mut carry, &inc);
                stats.step_index = traj.steps.len() + 1;
                stats.time = t;
                stats.energy = problem.hamiltonian(&y);
                stats.halvings_this_step = ctrl.halvings_this_step;
                ctrl.halvings_this_step = 0;
                if let Err(e) = ctrl.adapt(true) {
                    error = Some(e);
                    break;
                }
                let stride = settings.snapshot_stride;
                if stride > 0 && stats.step_index % stride == 0 {
                    traj.snapshots.push((t, y.clone()));
                }
                traj.steps.push(stats);
            }
            Err(e) if e.is_retryable() => {
                if let Err(underflow) = ctrl.adapt(false) {
                    error = Some(underflow);
                    break;
                }
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }

    if traj.snapshots.last().map(|(ts, _)| *ts) != Some(t) {
        traj.snapshots.push((t, y.clone()));
    }
    traj.final_time = t;
    traj.final_state = y;
    IntegrationResult { trajectory: traj, error }
}

/// Kahan summation `sum += inc`; `carry` holds the round-off still owed
/// (the exact running total is `sum - carry`).
fn kahan_add(sum: &mut f64, carry: &mut f64, inc: f64) {
    let corrected = inc - *carry;
    let next = *sum + corrected;
    *carry = (next - *sum) - corrected;
    *sum = next;
}

fn compensated_add(y: &mut DVector<f64>, carry: &mut DVector<f64>, inc: &DVector<f64>) {
    for ((yi, ci), &di) in y.iter_mut().zip(carry.iter_mut()).zip(inc.iter()) {
        kahan_add(yi, ci, di);
    }
}
