//! Files written into a run directory.
//!
//! Floating-point values use `{:.16e}` (17 significant digits, lossless for
//! `f64`); per-Newton lists are joined with `;` inside a single CSV field.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use hbvm_core::integrator::{IntegratorError, StepStats, Trajectory};
use serde::Serialize;

pub const STEPS_HEADER: &str = "step_index,t,h_used,newton_iters,warmup_iters,warmup_halvings,fgmres_iters,\
matrix_eq_iters,residual_final,energy,halvings_this_step";

pub const NEWTON_HEADER: &str = "step_index,newton_iter,residual,fgmres_iters,fgmres_target,fgmres_residual,matrix_eq_iters";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn steps_csv(steps: &[StepStats]) -> String {
    let mut out = String::with_capacity(64 * (steps.len() + 1));
    out.push_str(STEPS_HEADER);
    out.push('\n');
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.step_index,
            fmt_f64(s.time),
            fmt_f64(s.h_used),
            s.newton_iters,
            s.warmup_iters,
            s.warmup_halvings,
            join(&s.fgmres_iters_per_newton),
            join(&s.matrix_eq_iters),
            fmt_f64(s.residual_final),
            fmt_f64(s.energy),
            s.halvings_this_step
        );
    }
    out
}

/// One row per Newton iteration; row `newton_iter = 0` holds the residual
/// after the warm start.
pub fn newton_csv(steps: &[StepStats]) -> String {
    let mut out = String::new();
    out.push_str(NEWTON_HEADER);
    out.push('\n');
    for s in steps {
        for (p, res) in s.newton_residuals.iter().enumerate() {
            let (fg, target, fres, meq) = if p == 0 {
                (String::new(), String::new(), String::new(), String::new())
            } else {
                let i = p - 1;
                (
                    s.fgmres_iters_per_newton.get(i).map(|v| v.to_string()).unwrap_or_default(),
                    s.fgmres_targets.get(i).map(|&v| fmt_f64(v)).unwrap_or_default(),
                    s.fgmres_residuals.get(i).map(|&v| fmt_f64(v)).unwrap_or_default(),
                    s.matrix_eq_iters.get(i).map(|v| v.to_string()).unwrap_or_default(),
                )
            };
            let _ = writeln!(out, "{},{},{},{fg},{target},{fres},{meq}", s.step_index, p, fmt_f64(*res));
        }
    }
    out
}

pub fn snapshots_csv(traj: &Trajectory) -> String {
    let mut out = String::new();
    let dim = traj.snapshots.first().map_or(0, |(_, y)| y.len());
    out.push('t');
    for i in 0..dim {
        let _ = write!(out, ",y{i}");
    }
    out.push('\n');
    for (t, y) in &traj.snapshots {
        out.push_str(&fmt_f64(*t));
        for v in y.iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CountStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub total: usize,
}

impl CountStats {
    pub fn of(values: impl IntoIterator<Item = usize>) -> Option<CountStats> {
        let values: Vec<usize> = values.into_iter().collect();
        if values.is_empty() {
            return None;
        }
        let total: usize = values.iter().sum();
        Some(CountStats {
            min: *values.iter().min().unwrap(),
            max: *values.iter().max().unwrap(),
            mean: total as f64 / values.len() as f64,
            total,
        })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    /// Index the failing step would have had.
    pub step_index: usize,
    pub t: f64,
}

impl ErrorRecord {
    pub fn new(err: &IntegratorError, traj: &Trajectory) -> Self {
        ErrorRecord {
            kind: err.kind().to_string(),
            message: err.to_string(),
            step_index: traj.steps.len() + 1,
            t: traj.final_time,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    pub status: &'static str,
    pub steps: usize,
    pub final_time: f64,
    /// Accepted Newton iterations per step.
    pub newton_iters: Option<CountStats>,
    /// FGMRES iterations per Newton iteration.
    pub fgmres_iters: Option<CountStats>,
    /// Matrix-equation iterations summed per step.
    pub matrix_eq_iters: Option<CountStats>,
    pub warmup_iters: Option<CountStats>,
    pub warmup_halvings_total: usize,
    pub step_halvings_total: usize,
    pub residual_final_max: f64,
    pub initial_energy: f64,
    pub max_energy_drift: f64,
    pub max_relative_energy_drift: f64,
    pub wall_clock_seconds: f64,
    pub wall_clock_per_step_seconds: f64,
    pub error: Option<ErrorRecord>,
}

impl Summary {
    pub fn new(traj: &Trajectory, error: Option<&IntegratorError>, wall_clock_seconds: f64) -> Self {
        let steps = &traj.steps;
        let drift = traj.max_energy_drift();
        let scale = traj.initial_energy.abs();
        Summary {
            status: if error.is_none() { "ok" } else { "error" },
            steps: steps.len(),
            final_time: traj.final_time,
            newton_iters: CountStats::of(steps.iter().map(|s| s.newton_iters)),
            fgmres_iters: CountStats::of(steps.iter().flat_map(|s| s.fgmres_iters_per_newton.iter().copied())),
            matrix_eq_iters: CountStats::of(steps.iter().map(|s| s.matrix_eq_iters.iter().sum())),
            warmup_iters: CountStats::of(steps.iter().map(|s| s.warmup_iters)),
            warmup_halvings_total: steps.iter().map(|s| s.warmup_halvings).sum(),
            step_halvings_total: steps.iter().map(|s| s.halvings_this_step).sum(),
            residual_final_max: steps.iter().map(|s| s.residual_final).fold(0.0, f64::max),
            initial_energy: traj.initial_energy,
            max_energy_drift: drift,
            max_relative_energy_drift: if scale > 0.0 { drift / scale } else { drift },
            wall_clock_seconds,
            wall_clock_per_step_seconds: if steps.is_empty() { 0.0 } else { wall_clock_seconds / steps.len() as f64 },
            error: error.map(|e| ErrorRecord::new(e, traj)),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}
