use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hbvm_cli::config::{ConfigError, ConfigLayer, Preset, ProblemKind, RunConfig, SolverKind, StepperKind, SweepSpec};
use hbvm_cli::runner::{run_experiment, run_sweep};

const EXIT_SOLVER: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "hbvm", version, about = "Energy-conserving HBVM integrators with low-rank stage solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single configuration.
    Run(RunArgs),
    /// Run a grid of configurations concurrently, one subdirectory per cell.
    Sweep(SweepArgs),
    /// Validate a configuration and print it fully resolved.
    Check(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Write results here instead of <output-root>/<run name>.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Root directory of the sweep.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// JSON sweep grid: {"base": {...}, "N": [...], "s": [...], "k_offsets": [...]}.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Replace the grid's N values.
    #[arg(long = "N-list", value_delimiter = ',')]
    n_list: Vec<usize>,
    /// Replace the grid's s values.
    #[arg(long, value_delimiter = ',')]
    s_list: Vec<usize>,
    /// Replace the grid's k - s offsets.
    #[arg(long, value_delimiter = ',')]
    k_offsets: Vec<usize>,
}

/// Flags mirroring the configuration fields; they override preset and file values.
#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper-5.1, paper-5.2-case1 or paper-5.2-case2.
    #[arg(long)]
    preset: Option<String>,
    /// Default parent directory for outputs.
    #[arg(long, env = "HBVM_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[arg(long, value_enum)]
    problem: Option<ProblemKind>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "L")]
    length: Option<f64>,
    #[arg(long = "T")]
    t_end: Option<f64>,
    #[arg(long)]
    h0: Option<f64>,
    #[arg(long)]
    h_min: Option<f64>,
    #[arg(long)]
    h_max: Option<f64>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    stepper: Option<StepperKind>,
    #[arg(long, value_enum)]
    matrix_solver: Option<SolverKind>,
    #[arg(long)]
    matrix_tol: Option<f64>,
    #[arg(long)]
    newton_abs: Option<f64>,
    #[arg(long)]
    newton_rel: Option<f64>,
    #[arg(long)]
    max_newton: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta_max: Option<f64>,
    #[arg(long)]
    snapshot_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn flag_layer(&self, output_dir: Option<PathBuf>) -> ConfigLayer {
        ConfigLayer {
            problem: self.problem,
            n: self.n,
            length: self.length,
            t_end: self.t_end,
            h0: self.h0,
            h_min: self.h_min,
            h_max: self.h_max,
            s: self.s,
            k: self.k,
            stepper: self.stepper,
            matrix_solver: self.matrix_solver,
            matrix_tol: self.matrix_tol,
            newton_abs: self.newton_abs,
            newton_rel: self.newton_rel,
            max_newton: self.max_newton,
            gamma: self.gamma,
            eta_max: self.eta_max,
            snapshot_stride: self.snapshot_stride,
            output_dir,
            seed: self.seed,
        }
    }

    fn preset(&self) -> Result<Option<Preset>, ConfigError> {
        self.preset.as_deref().map(str::parse).transpose()
    }

    fn file_layer(&self) -> Result<ConfigLayer, ConfigError> {
        self.config.as_deref().map(ConfigLayer::from_json_file).transpose().map(Option::unwrap_or_default)
    }
}

/// Defaults, then preset, then file, then flags.
fn resolve_run(args: &RunArgs) -> Result<RunConfig, ConfigError> {
    let mut layer = match args.common.preset()? {
        Some(preset) => preset.layer()?,
        None => ConfigLayer::default(),
    };
    layer = layer.merged(&args.common.file_layer()?);
    layer = layer.merged(&args.common.flag_layer(args.output_dir.clone()));
    layer.resolve()
}

fn resolve_sweep(args: &SweepArgs) -> Result<Vec<RunConfig>, ConfigError> {
    let mut spec = match (&args.grid, args.common.preset()?) {
        (Some(path), _) => SweepSpec::from_json_file(path)?,
        (None, Some(preset)) => preset.sweep(),
        (None, None) => SweepSpec::default(),
    };
    if !args.n_list.is_empty() {
        spec.n_values = args.n_list.clone();
    }
    if !args.s_list.is_empty() {
        spec.s_values = args.s_list.clone();
    }
    if !args.k_offsets.is_empty() {
        spec.k_offsets = args.k_offsets.clone();
    }
    let overrides = args.common.file_layer()?.merged(&args.common.flag_layer(None));
    spec.cells(&overrides)
}

fn output_dir(explicit: Option<&Path>, root: &Path, name: String) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| root.join(name))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Check(args) => match resolve_run(&args) {
            Ok(cfg) => {
                println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Run(args) => {
            let cfg = match resolve_run(&args) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let dir = output_dir(cfg.output_dir.as_deref(), &args.common.output_root, cfg.default_dir_name());
            match run_experiment(&cfg, &dir) {
                Ok(report) => {
                    println!("{}: {} steps, results in {}", cfg.default_dir_name(), report.summary.steps, report.dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_SOLVER)
                }
            }
        }
        Command::Sweep(args) => {
            let cells = match resolve_sweep(&args) {
                Ok(cells) => cells,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let name = args.common.preset.clone().unwrap_or_else(|| "sweep".to_string());
            let root = output_dir(args.output_dir.as_deref(), &args.common.output_root, name);
            match run_sweep(&cells, &root) {
                Ok(results) => {
                    let failed: Vec<_> = results.iter().filter_map(|(cfg, r)| r.as_ref().err().map(|e| (cfg, e))).collect();
                    for (cfg, e) in &failed {
                        eprintln!("{}: {e}", cfg.default_dir_name());
                    }
                    println!("{} cells, {} failed, results in {}", results.len(), failed.len(), root.display());
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_SOLVER)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_SOLVER)
                }
            }
        }
    }
}
