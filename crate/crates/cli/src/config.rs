//! Run configuration: defaults, presets, JSON files and command-line
//! overrides, merged in that order and validated as a whole.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hbvm_core::integrator::{IntegrationSettings, MatrixSolver, SolverOptions, Stepper};
use hbvm_core::newton_krylov::ForcingParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    LinearWave,
    SemilinearWave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StepperKind {
    Linear,
    SimplifiedNewton,
    NewtonKrylov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Poly,
    Extended,
}

impl From<StepperKind> for Stepper {
    fn from(kind: StepperKind) -> Self {
        match kind {
            StepperKind::Linear => Stepper::Linear,
            StepperKind::SimplifiedNewton => Stepper::SimplifiedNewton,
            StepperKind::NewtonKrylov => Stepper::NewtonKrylov,
        }
    }
}

impl From<SolverKind> for MatrixSolver {
    fn from(kind: SolverKind) -> Self {
        match kind {
            SolverKind::Poly => MatrixSolver::Polynomial,
            SolverKind::Extended => MatrixSolver::Extended,
        }
    }
}

/// Fully resolved configuration of one run; written verbatim to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    #[serde(rename = "N")]
    pub n: usize,
    /// Length of `[0, L]` for the linear wave, half-width of `(-L, L)` for the semilinear one.
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub s: usize,
    pub k: usize,
    pub stepper: StepperKind,
    pub matrix_solver: SolverKind,
    pub matrix_tol: f64,
    pub newton_abs: f64,
    pub newton_rel: f64,
    pub max_newton: usize,
    pub gamma: f64,
    pub eta_max: f64,
    pub snapshot_stride: usize,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn settings(&self) -> IntegrationSettings {
        IntegrationSettings {
            t_end: self.t_end,
            h0: self.h0,
            h_min: self.h_min,
            h_max: self.h_max,
            stepper: self.stepper.into(),
            snapshot_stride: self.snapshot_stride,
            solver: SolverOptions {
                matrix_solver: self.matrix_solver.into(),
                matrix_tol: self.matrix_tol,
                newton_abs: self.newton_abs,
                newton_rel: self.newton_rel,
                max_newton: self.max_newton,
                forcing: ForcingParams { gamma: self.gamma, eta_max: self.eta_max },
                ..SolverOptions::default()
            },
        }
    }

    /// Directory name used when no output directory is given.
    pub fn default_dir_name(&self) -> String {
        let problem = match self.problem {
            ProblemKind::LinearWave => "linear-wave",
            ProblemKind::SemilinearWave => "semilinear-wave",
        };
        format!("{problem}_N{}_s{}_k{}", self.n, self.s, self.k)
    }
}

/// One layer of partial configuration. Later layers override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigLayer {
    pub problem: Option<ProblemKind>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "L")]
    pub length: Option<f64>,
    #[serde(rename = "T")]
    pub t_end: Option<f64>,
    pub h0: Option<f64>,
    pub h_min: Option<f64>,
    pub h_max: Option<f64>,
    pub s: Option<usize>,
    pub k: Option<usize>,
    pub stepper: Option<StepperKind>,
    pub matrix_solver: Option<SolverKind>,
    pub matrix_tol: Option<f64>,
    pub newton_abs: Option<f64>,
    pub newton_rel: Option<f64>,
    pub max_newton: Option<usize>,
    pub gamma: Option<f64>,
    pub eta_max: Option<f64>,
    pub snapshot_stride: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl ConfigLayer {
    /// `self` with every field set in `top` replaced.
    pub fn merged(mut self, top: &ConfigLayer) -> ConfigLayer {
        overlay!(
            self, top, problem, n, length, t_end, h0, h_min, h_max, s, k, stepper, matrix_solver, matrix_tol,
            newton_abs, newton_rel, max_newton, gamma, eta_max, snapshot_stride, output_dir, seed
        );
        self
    }

    pub fn from_json_file(path: &Path) -> Result<ConfigLayer, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(path.to_path_buf(), e.to_string()))
    }

    /// Fill defaults and validate. Unset step sizes default to `h0 = 1/N`,
    /// `h_min = h0/1024` and `h_max = h0`.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let problem = self.problem.unwrap_or(ProblemKind::LinearWave);
        let n = self.n.unwrap_or(256);
        let h0 = self.h0.unwrap_or(1.0 / n.max(1) as f64);
        let s = self.s.unwrap_or(2);
        let cfg = RunConfig {
            problem,
            n,
            length: self.length.unwrap_or(1.0),
            t_end: self.t_end.unwrap_or(1.0),
            h0,
            h_min: self.h_min.unwrap_or(h0 / 1024.0),
            h_max: self.h_max.unwrap_or(h0),
            s,
            k: self.k.unwrap_or(s + 1),
            stepper: self.stepper.unwrap_or(match problem {
                ProblemKind::LinearWave => StepperKind::Linear,
                ProblemKind::SemilinearWave => StepperKind::NewtonKrylov,
            }),
            matrix_solver: self.matrix_solver.unwrap_or(SolverKind::Extended),
            matrix_tol: self.matrix_tol.unwrap_or(1e-10),
            newton_abs: self.newton_abs.unwrap_or(1e-8),
            newton_rel: self.newton_rel.unwrap_or(1e-10),
            max_newton: self.max_newton.unwrap_or(100),
            gamma: self.gamma.unwrap_or(0.9),
            eta_max: self.eta_max.unwrap_or(0.9),
            snapshot_stride: self.snapshot_stride.unwrap_or(0),
            output_dir: self.output_dir.clone(),
            seed: self.seed.unwrap_or(0),
        };
        validate(&cfg)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub constraint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration:{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, String),
    #[error("cannot parse {0}: {1}")]
    Parse(PathBuf, String),
    #[error("unknown preset '{0}' (expected paper-5.1, paper-5.2-case1 or paper-5.2-case2)")]
    UnknownPreset(String),
    #[error("preset '{0}' describes a sweep; use the sweep command")]
    SweepPreset(String),
    #[error("sweep grid is empty: {0}")]
    EmptySweep(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("\n  {}: {}", x.field, x.constraint)).collect()
}

fn positive(value: f64) -> bool {
    value.is_finite() && value > 0.0
}

/// Collects every violated invariant rather than stopping at the first.
pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let mut out = Vec::new();
    let mut check = |ok: bool, field: &'static str, constraint: String| {
        if !ok {
            out.push(Violation { field, constraint });
        }
    };
    check(cfg.n >= 3, "N", format!("must be at least 3, got {}", cfg.n));
    check(positive(cfg.length), "L", format!("must be positive, got {}", cfg.length));
    check(positive(cfg.t_end), "T", format!("must be positive, got {}", cfg.t_end));
    check(cfg.s >= 1, "s", format!("must be at least 1, got {}", cfg.s));
    check(cfg.k >= cfg.s, "k", format!("must satisfy k >= s = {}, got {}", cfg.s, cfg.k));
    check(positive(cfg.h0), "h0", format!("must be positive, got {}", cfg.h0));
    check(
        positive(cfg.h_min) && cfg.h_min <= cfg.h0,
        "h_min",
        format!("must satisfy 0 < h_min <= h0 = {}, got {}", cfg.h0, cfg.h_min),
    );
    check(
        cfg.h_max.is_finite() && cfg.h_max >= cfg.h0,
        "h_max",
        format!("must satisfy h_max >= h0 = {}, got {}", cfg.h0, cfg.h_max),
    );
    check(positive(cfg.matrix_tol), "matrix_tol", format!("must be positive, got {}", cfg.matrix_tol));
    check(positive(cfg.newton_abs), "newton_abs", format!("must be positive, got {}", cfg.newton_abs));
    check(positive(cfg.newton_rel), "newton_rel", format!("must be positive, got {}", cfg.newton_rel));
    check(cfg.max_newton >= 1, "max_newton", format!("must be at least 1, got {}", cfg.max_newton));
    check(cfg.gamma > 0.0 && cfg.gamma <= 1.0, "gamma", format!("must lie in (0, 1], got {}", cfg.gamma));
    check(cfg.eta_max > 0.0 && cfg.eta_max < 1.0, "eta_max", format!("must lie in (0, 1), got {}", cfg.eta_max));
    check(
        !(cfg.stepper == StepperKind::Linear && cfg.problem != ProblemKind::LinearWave),
        "stepper",
        "linear stepper requires problem = linear-wave".to_string(),
    );
    if out.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(out))
    }
}

/// Named experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Linear wave sweep over `N = 2^9..2^14`, `s = 2..10`, `k = s+1..s+10`.
    Paper51,
    /// Semilinear wave, `N = 1024`, `s = 2`, `k = 3`.
    Paper52Case1,
    /// Semilinear wave, `N = 1024`, `s = 3`, `k = 6`.
    Paper52Case2,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper-5.1" => Ok(Preset::Paper51),
            "paper-5.2-case1" => Ok(Preset::Paper52Case1),
            "paper-5.2-case2" => Ok(Preset::Paper52Case2),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper51 => "paper-5.1",
            Preset::Paper52Case1 => "paper-5.2-case1",
            Preset::Paper52Case2 => "paper-5.2-case2",
        })
    }
}

impl Preset {
    /// Sweep description; single-run presets become one-cell sweeps.
    pub fn sweep(&self) -> SweepSpec {
        match self {
            Preset::Paper51 => SweepSpec {
                base: ConfigLayer {
                    problem: Some(ProblemKind::LinearWave),
                    stepper: Some(StepperKind::Linear),
                    matrix_solver: Some(SolverKind::Extended),
                    matrix_tol: Some(1e-10),
                    ..Default::default()
                },
                n_values: (9..=14).map(|j| 1usize << j).collect(),
                s_values: (2..=10).collect(),
                k_offsets: (1..=10).collect(),
            },
            Preset::Paper52Case1 | Preset::Paper52Case2 => {
                let base = self.layer().expect("single-run preset");
                SweepSpec {
                    n_values: vec![base.n.unwrap_or(1024)],
                    s_values: vec![base.s.unwrap_or(2)],
                    k_offsets: vec![base.k.unwrap_or(3) - base.s.unwrap_or(2)],
                    base,
                }
            }
        }
    }

    /// Configuration layer of a single-run preset.
    pub fn layer(&self) -> Result<ConfigLayer, ConfigError> {
        let (s, k) = match self {
            Preset::Paper51 => return Err(ConfigError::SweepPreset(self.to_string())),
            Preset::Paper52Case1 => (2, 3),
            Preset::Paper52Case2 => (3, 6),
        };
        Ok(ConfigLayer {
            problem: Some(ProblemKind::SemilinearWave),
            n: Some(1024),
            s: Some(s),
            k: Some(k),
            stepper: Some(StepperKind::NewtonKrylov),
            matrix_solver: Some(SolverKind::Extended),
            ..Default::default()
        })
    }
}

/// Grid of runs: every `(N, s, k = s + offset)` combination on top of `base`.
/// Step sizes default to `1/N` per cell unless `base` fixes them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ConfigLayer,
    #[serde(rename = "N")]
    pub n_values: Vec<usize>,
    #[serde(rename = "s")]
    pub s_values: Vec<usize>,
    pub k_offsets: Vec<usize>,
}

impl SweepSpec {
    pub fn from_json_file(path: &Path) -> Result<SweepSpec, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(path.to_path_buf(), e.to_string()))
    }

    /// Resolve every cell; errors from all cells are reported together.
    pub fn cells(&self, overrides: &ConfigLayer) -> Result<Vec<RunConfig>, ConfigError> {
        if self.n_values.is_empty() || self.s_values.is_empty() || self.k_offsets.is_empty() {
            return Err(ConfigError::EmptySweep("N, s and k_offsets must each list at least one value".into()));
        }
        let base = self.base.clone().merged(overrides);
        let mut cells = Vec::new();
        let mut violations = Vec::new();
        for &n in &self.n_values {
            for &s in &self.s_values {
                for &off in &self.k_offsets {
                    let cell = ConfigLayer { n: Some(n), s: Some(s), k: Some(s + off), output_dir: None, ..base.clone() };
                    match cell.resolve() {
                        Ok(cfg) => cells.push(cfg),
                        Err(ConfigError::Invalid(v)) => violations.extend(v),
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if violations.is_empty() {
            Ok(cells)
        } else {
            violations.dedup();
            Err(ConfigError::Invalid(violations))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_follow_the_paper() {
        let cfg = ConfigLayer::default().resolve().unwrap();
        assert_eq!(cfg.matrix_tol, 1e-10);
        assert_eq!(cfg.newton_abs, 1e-8);
        assert_eq!(cfg.newton_rel, 1e-10);
        assert_eq!(cfg.max_newton, 100);
        assert_eq!(cfg.h0, 1.0 / 256.0);
        assert_eq!(cfg.k, 3);
    }

    #[test]
    fn k_below_s_names_k() {
        let err = ConfigLayer { s: Some(3), k: Some(2), ..Default::default() }.resolve().unwrap_err();
        match err {
            ConfigError::Invalid(v) => assert!(v.iter().any(|x| x.field == "k")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn all_violations_are_reported_together() {
        let layer = ConfigLayer { n: Some(2), t_end: Some(-1.0), matrix_tol: Some(0.0), ..Default::default() };
        let ConfigError::Invalid(v) = layer.resolve().unwrap_err() else { panic!() };
        let fields: Vec<_> = v.iter().map(|x| x.field).collect();
        for f in ["N", "T", "matrix_tol"] {
            assert!(fields.contains(&f), "{fields:?}");
        }
    }

    #[test]
    fn later_layers_win() {
        let file = ConfigLayer { n: Some(64), s: Some(3), ..Default::default() };
        let flags = ConfigLayer { n: Some(128), ..Default::default() };
        let cfg = file.merged(&flags).resolve().unwrap();
        assert_eq!((cfg.n, cfg.s, cfg.k), (128, 3, 4));
        assert_eq!(cfg.h0, 1.0 / 128.0);
    }

    #[test]
    fn presets_match_the_experiments() {
        let sweep = Preset::Paper51.sweep();
        assert_eq!(sweep.n_values, vec![512, 1024, 2048, 4096, 8192, 16384]);
        assert_eq!(sweep.s_values, (2..=10).collect::<Vec<_>>());
        assert_eq!(sweep.k_offsets, (1..=10).collect::<Vec<_>>());
        let case1 = Preset::Paper52Case1.layer().unwrap().resolve().unwrap();
        assert_eq!((case1.problem, case1.n, case1.s, case1.k), (ProblemKind::SemilinearWave, 1024, 2, 3));
        assert_eq!(case1.h0, 1.0 / 1024.0);
        let case2 = Preset::Paper52Case2.layer().unwrap().resolve().unwrap();
        assert_eq!((case2.s, case2.k), (3, 6));
        assert!(matches!(Preset::Paper51.layer(), Err(ConfigError::SweepPreset(_))));
        assert!("paper-9".parse::<Preset>().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let cfg = ConfigLayer::default().resolve().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let layer: ConfigLayer = serde_json::from_str(&text).unwrap();
        assert_eq!(layer.resolve().unwrap(), cfg);
        assert!(serde_json::from_str::<ConfigLayer>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn sweep_cells_use_per_cell_step_size() {
        let spec = SweepSpec { n_values: vec![256, 512], s_values: vec![2, 3], k_offsets: vec![1], ..Default::default() };
        let cells = spec.cells(&ConfigLayer::default()).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.h0 == 1.0 / c.n as f64 && c.k == c.s + 1));
    }
}
