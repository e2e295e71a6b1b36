//! Command-line front end: reproducible solves, bound tables, Monte Carlo
//! runs, and the cross-validation battery.
//!
//! Exit codes: 0 success, 1 config/usage error, 2 solver non-convergence,
//! 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use ruin_core::config::ExperimentConfig;
use ruin_core::grid::{Grid, GridSpec, RegionMap, ValueField};
use ruin_core::sim::{estimate_ruin_probability, DeathMode, SimOptions, StrategySpec};
use ruin_core::solver::{solve, SolveError, Solution, ViSolver};

mod verify;

const EXIT_CONFIG: u8 = 1;
const EXIT_NONCONVERGENCE: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ruin",
    about = "Minimal lifetime-ruin probability under proportional transaction costs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the variational inequality and write value.csv, regions.csv,
    /// report.json.
    Solve { config: PathBuf },
    /// Tabulate the closed-form bounds over the grid into bounds.csv.
    Bounds { config: PathBuf },
    /// Monte Carlo ruin-probability estimate for one strategy; writes mc.json.
    Simulate {
        config: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Initial money-market position.
        #[arg(long)]
        x0: f64,
        /// Initial stock position.
        #[arg(long)]
        y0: f64,
        /// Euler step override.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        n_paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run the cross-validation battery; writes verify.json.
    Verify { config: PathBuf },
    /// Solve at several nested resolutions and report convergence; writes
    /// sweep.csv.
    Sweep {
        config: PathBuf,
        /// Comma-separated node counts, e.g. 51,101,201 (each refining the
        /// previous).
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Re-extract regions.csv from a saved value.csv.
    RegionMap { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    LiquidateNow,
    NoTransaction,
    Feedback,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SampleDeath,
    DiscountDeath,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    NonConvergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NonConvergence(_) => EXIT_NONCONVERGENCE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) | CliError::NonConvergence(msg) => f.write_str(msg),
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Solve { config } => {
            let cfg = load_config(&config)?;
            cmd_solve(&cfg)
        }
        Command::Bounds { config } => {
            let cfg = load_config(&config)?;
            cmd_bounds(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            config,
            strategy,
            x0,
            y0,
            dt,
            n_paths,
            seed,
            mode,
        } => {
            let cfg = load_config(&config)?;
            cmd_simulate(&cfg, strategy, x0, y0, dt, n_paths, seed, mode)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { config } => {
            let cfg = load_config(&config)?;
            let all_pass = verify::cmd_verify(&cfg)?;
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFICATION)
            })
        }
        Command::Sweep { config, sizes } => {
            let cfg = load_config(&config)?;
            cmd_sweep(&cfg, &sizes)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::RegionMap { config } => {
            let cfg = load_config(&config)?;
            cmd_region_map(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.workers > 0 {
        // Best effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    Ok(cfg)
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Config(format!("cannot create output dir: {e}")))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), text)
        .map_err(|e| CliError::Config(format!("cannot write {name}: {e}")))
}

fn report_json(report: &ruin_core::SolveReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn cmd_solve(cfg: &ExperimentConfig) -> Result<ExitCode, CliError> {
    ensure_output_dir(cfg)?;
    match solve(&cfg.market, &cfg.grid, &cfg.solver) {
        Ok(solution) => {
            write_text(&cfg.output_dir, "value.csv", &solution.field.to_csv_string())?;
            write_text(
                &cfg.output_dir,
                "regions.csv",
                &solution.regions.to_csv_string(),
            )?;
            write_text(&cfg.output_dir, "report.json", &report_json(&solution.report))?;
            println!(
                "converged in {} sweeps (sup update {:.3e}, residual {:.3e}, {} ms)",
                solution.report.iterations,
                solution.report.sup_update,
                solution.report.residual,
                solution.report.wall_ms
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(SolveError::Grid(e)) => Err(CliError::Config(e.to_string())),
        Err(SolveError::NonConvergence(e)) => {
            write_text(&cfg.output_dir, "report.json", &report_json(&e.report))?;
            Err(CliError::NonConvergence(e.to_string()))
        }
    }
}

fn cmd_bounds(cfg: &ExperimentConfig) -> Result<(), CliError> {
    use ruin_core::closed_form::{
        frictionless_psi_k_clamped, lower_bound_psi_clamped, upper_bound_psi_clamped,
        ClosedFormConstants,
    };
    ensure_output_dir(cfg)?;
    let p = &cfg.market;
    let grid = Grid::build(p, &cfg.grid).map_err(|e| CliError::Config(e.to_string()))?;
    let constants = ClosedFormConstants::from_params(p);
    let k_mid = p.midpoint_k();
    let mut csv = String::from("x,y,psi_upper,psi_lower,psi_k_mid\n");
    for &idx in grid.active() {
        let (x, y) = grid.node_xy(idx as usize);
        let upper = upper_bound_psi_clamped(p, x, y).0;
        let lower = lower_bound_psi_clamped(p, &constants, x, y).0;
        let mid = frictionless_psi_k_clamped(p, &constants, k_mid, x, y).0;
        csv.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            x, y, upper, lower, mid
        ));
    }
    write_text(&cfg.output_dir, "bounds.csv", &csv)?;
    println!("wrote bounds.csv ({} rows)", grid.active().len());
    Ok(())
}

/// Loads a prior solve's field from the output directory, or solves inline.
fn load_or_solve(cfg: &ExperimentConfig) -> Result<Solution, CliError> {
    let value_path = cfg.output_dir.join("value.csv");
    let grid = Grid::build(&cfg.market, &cfg.grid).map_err(|e| CliError::Config(e.to_string()))?;
    if value_path.exists() {
        let text = fs::read_to_string(&value_path)
            .map_err(|e| CliError::Config(format!("cannot read value.csv: {e}")))?;
        let field = ValueField::read_csv(grid.clone(), &text)
            .map_err(|e| CliError::Config(format!("value.csv does not match the grid: {e}")))?;
        let solver = ViSolver::new(grid, cfg.solver);
        let regions = solver.extract_region_map(&field);
        let residual = solver.residual(&field);
        let report = ruin_core::SolveReport {
            iterations: 0,
            sup_update: f64::NAN,
            residual: residual.sup_positive,
            wall_ms: 0,
        };
        Ok(Solution {
            field,
            regions,
            report,
        })
    } else {
        solve(&cfg.market, &cfg.grid, &cfg.solver).map_err(|e| match e {
            SolveError::Grid(g) => CliError::Config(g.to_string()),
            SolveError::NonConvergence(n) => CliError::NonConvergence(n.to_string()),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cfg: &ExperimentConfig,
    strategy: StrategyArg,
    x0: f64,
    y0: f64,
    dt: Option<f64>,
    n_paths: Option<usize>,
    seed: Option<u64>,
    mode: Option<ModeArg>,
) -> Result<(), CliError> {
    ensure_output_dir(cfg)?;
    let p = &cfg.market;
    if p.liquidation_value(x0, y0) < p.b {
        return Err(CliError::Config(format!(
            "initial point ({x0}, {y0}) lies outside the closed solvency region"
        )));
    }
    let strat = match strategy {
        StrategyArg::LiquidateNow => StrategySpec::LiquidateNow,
        StrategyArg::NoTransaction => StrategySpec::NoTransaction,
        StrategyArg::Feedback => {
            let solution = load_or_solve(cfg)?;
            StrategySpec::FeedbackRegionMap(Arc::new(solution.regions))
        }
    };
    let opts = SimOptions {
        dt: dt.unwrap_or(cfg.mc.dt),
        mode: match mode {
            Some(ModeArg::SampleDeath) => DeathMode::SampleDeath,
            Some(ModeArg::DiscountDeath) => DeathMode::DiscountDeath,
            None => cfg.mc.mode,
        },
        t_max: cfg.mc.t_max,
    };
    let n = n_paths.unwrap_or(cfg.mc.n_paths);
    let seed = seed.unwrap_or(cfg.mc.seed);
    let result = estimate_ruin_probability(p, &strat, x0, y0, &opts, n, seed);
    let json = serde_json::json!({
        "estimate": result.estimate,
        "stderr": result.stderr,
        "n_paths": result.n_paths,
        "n_ruin": result.n_ruin,
        "n_safe": result.n_safe,
        "n_death": result.n_death,
        "censored": result.censored,
    });
    let mut text = serde_json::to_string_pretty(&json).expect("json serializes");
    text.push('\n');
    write_text(&cfg.output_dir, "mc.json", &text)?;
    println!(
        "estimate {:.6} +- {:.6} ({} paths: {} ruin, {} safe, {} death, {} censored)",
        result.estimate, result.stderr, result.n_paths, result.n_ruin, result.n_safe,
        result.n_death, result.censored
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<(), CliError> {
    use ruin_core::closed_form::{frictionless_psi_k_clamped, ClosedFormConstants};
    if sizes.len() < 2 {
        return Err(CliError::Config(
            "sweep needs at least two grid sizes".into(),
        ));
    }
    for pair in sizes.windows(2) {
        if pair[1] <= pair[0] || (pair[1] - 1) % (pair[0] - 1) != 0 {
            return Err(CliError::Config(format!(
                "sizes must be nested refinements (got {} then {})",
                pair[0], pair[1]
            )));
        }
    }
    ensure_output_dir(cfg)?;
    let p = &cfg.market;
    let constants = ClosedFormConstants::from_params(p);
    let k_mid = p.midpoint_k();

    let mut fields: Vec<ValueField> = Vec::new();
    let mut csv = String::from("size,diff_to_prev,err_vs_psi_k_mid\n");
    for &size in sizes {
        let spec = GridSpec {
            nx: size,
            ny: size,
            ..cfg.grid
        };
        let solution = solve(p, &spec, &cfg.solver).map_err(|e| match e {
            SolveError::Grid(g) => CliError::Config(g.to_string()),
            SolveError::NonConvergence(n) => CliError::NonConvergence(n.to_string()),
        })?;
        let grid = solution.field.grid().clone();
        let err = grid
            .interior()
            .iter()
            .map(|&n| {
                let (x, y) = grid.node_xy(n as usize);
                let psi = frictionless_psi_k_clamped(p, &constants, k_mid, x, y).0;
                (solution.field.values()[n as usize] - psi).abs()
            })
            .fold(0.0f64, f64::max);
        let diff = fields
            .last()
            .map(|prev| shared_node_diff(prev, &solution.field));
        match diff {
            Some(d) => csv.push_str(&format!("{size},{:.16e},{:.16e}\n", d, err)),
            None => csv.push_str(&format!("{size},,{:.16e}\n", err)),
        }
        fields.push(solution.field);
    }
    write_text(&cfg.output_dir, "sweep.csv", &csv)?;
    println!("wrote sweep.csv for sizes {sizes:?}");
    Ok(())
}

/// Sup-norm difference between a coarse and a nested fine solution over the
/// coarse interior nodes.
fn shared_node_diff(coarse: &ValueField, fine: &ValueField) -> f64 {
    let cg = coarse.grid();
    let fg = fine.grid();
    let ratio = (fg.nx() - 1) / (cg.nx() - 1);
    let mut sup = 0.0f64;
    for &n in cg.interior() {
        let (i, j) = cg.coords(n as usize);
        let fidx = fg.index(ratio * i, ratio * j);
        if fg.class(fidx) == ruin_core::NodeClass::Interior {
            sup = sup.max((coarse.values()[n as usize] - fine.values()[fidx]).abs());
        }
    }
    sup
}

fn cmd_region_map(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let value_path = cfg.output_dir.join("value.csv");
    if !value_path.exists() {
        return Err(CliError::Config(format!(
            "no value.csv in {} (run solve first)",
            cfg.output_dir.display()
        )));
    }
    let grid = Grid::build(&cfg.market, &cfg.grid).map_err(|e| CliError::Config(e.to_string()))?;
    let text = fs::read_to_string(&value_path)
        .map_err(|e| CliError::Config(format!("cannot read value.csv: {e}")))?;
    let field = ValueField::read_csv(grid.clone(), &text)
        .map_err(|e| CliError::Config(format!("value.csv does not match the grid: {e}")))?;
    let solver = ViSolver::new(grid, cfg.solver);
    let map: RegionMap = solver.extract_region_map(&field);
    write_text(&cfg.output_dir, "regions.csv", &map.to_csv_string())?;
    println!("wrote regions.csv");
    Ok(())
}
