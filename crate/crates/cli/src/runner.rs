//! Executing runs and sweeps.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hbvm_core::integrator::{integrate, IntegratorError};
use hbvm_core::problems::{build_linear_wave, build_semilinear_wave, gaussian_pulse, Potential, ProblemError, WaveProblem};
use hbvm_core::{HbvmTableau, TableauError};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ProblemKind, RunConfig};
use crate::output::{newton_csv, snapshots_csv, steps_csv, write_json, Summary};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot write {0}: {1}")]
    Io(PathBuf, #[source] io::Error),
    #[error("problem setup failed: {0}")]
    Problem(#[from] ProblemError),
    #[error("tableau construction failed: {0}")]
    Tableau(#[from] TableauError),
    #[error("integration stopped at t = {t}: {error}")]
    Solver { t: f64, error: IntegratorError },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub summary: Summary,
}

/// Problem and initial state: a Gaussian pulse `exp(-100 (x - c)^2)` at rest,
/// centred at `L/2` on `[0, L]` (linear) or at `0` on `(-L, L)` (semilinear).
pub fn build_problem(cfg: &RunConfig) -> Result<(WaveProblem, DVector<f64>), ProblemError> {
    let (problem, center) = match cfg.problem {
        ProblemKind::LinearWave => (build_linear_wave(cfg.n, cfg.length)?, 0.5 * cfg.length),
        ProblemKind::SemilinearWave => (build_semilinear_wave(cfg.n, cfg.length, Potential::cubic())?, 0.0),
    };
    let y0 = problem.initial_state(gaussian_pulse(center), |_| 0.0);
    Ok((problem, y0))
}

fn write(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|e| RunError::Io(path.to_path_buf(), e))
}

/// Run one configuration and write `config.json`, `steps.csv`, `newton.csv`,
/// `summary.json` and, with a snapshot stride, `snapshots.csv` into `dir`.
/// Outputs are written even when the integration stops early.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<RunReport, RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::Io(dir.to_path_buf(), e))?;
    let resolved = RunConfig { output_dir: Some(dir.to_path_buf()), ..cfg.clone() };
    let config_path = dir.join("config.json");
    write_json(&config_path, &resolved).map_err(|e| RunError::Io(config_path, e))?;

    let tableau = HbvmTableau::new(cfg.k, cfg.s)?;
    let (problem, y0) = build_problem(cfg)?;
    let start = Instant::now();
    let result = integrate(&problem, &tableau, &y0, &cfg.settings());
    let elapsed = start.elapsed().as_secs_f64();
    let traj = &result.trajectory;

    write(&dir.join("steps.csv"), &steps_csv(&traj.steps))?;
    write(&dir.join("newton.csv"), &newton_csv(&traj.steps))?;
    if cfg.snapshot_stride > 0 {
        write(&dir.join("snapshots.csv"), &snapshots_csv(traj))?;
    }
    let summary = Summary::new(traj, result.error.as_ref(), elapsed);
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary).map_err(|e| RunError::Io(summary_path, e))?;

    match result.error {
        None => Ok(RunReport { dir: dir.to_path_buf(), summary }),
        Some(error) => Err(RunError::Solver { t: traj.final_time, error }),
    }
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    dir: String,
    #[serde(rename = "N")]
    n: usize,
    s: usize,
    k: usize,
    status: String,
}

/// Run every cell concurrently, each in its own subdirectory of `root`, and
/// write an index `sweep.json`. Cells are independent; a failing cell does
/// not stop the others.
pub fn run_sweep(cells: &[RunConfig], root: &Path) -> Result<Vec<(RunConfig, Result<RunReport, RunError>)>, RunError> {
    fs::create_dir_all(root).map_err(|e| RunError::Io(root.to_path_buf(), e))?;
    let results: Vec<(RunConfig, Result<RunReport, RunError>)> = cells
        .par_iter()
        .map(|cfg| {
            let dir = root.join(cfg.default_dir_name());
            (cfg.clone(), run_experiment(cfg, &dir))
        })
        .collect();
    let index: Vec<SweepEntry> = results
        .iter()
        .map(|(cfg, res)| SweepEntry {
            dir: cfg.default_dir_name(),
            n: cfg.n,
            s: cfg.s,
            k: cfg.k,
            status: match res {
                Ok(_) => "ok".to_string(),
                Err(e) => e.to_string(),
            },
        })
        .collect();
    let index_path = root.join("sweep.json");
    write_json(&index_path, &index).map_err(|e| RunError::Io(index_path, e))?;
    Ok(results)
}
