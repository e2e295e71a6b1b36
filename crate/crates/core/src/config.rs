//! Sectioned key-value experiment configuration.
//!
//! Flat `key = value` lines under `[market]`, `[grid]`, `[solver]`, `[mc]`,
//! and optional `[verify]` headers; `workers` and `output_dir` live above the
//! first section. `#` and `;` start comments. The format is deliberately
//! line-diffable for experiment tracking.
//!
//! ```text
//! workers = 0
//! output_dir = out
//!
//! [market]
//! r = 0.04
//! ...
//! ```
//!
//! The `[market]` section is required in full; every other key has a
//! default. Unknown sections or keys are errors.

use std::path::PathBuf;

use thiserror::Error;

use crate::grid::{GridError, GridSpec};
use crate::market::{MarketParams, ParamError};
use crate::sim::DeathMode;
use crate::solver::SolverConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section `[{name}]`")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in section `[{section}]`")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: invalid value for `{key}`: `{value}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("market config: {0}")]
    Market(#[from] ParamError),
    #[error("grid config: {0}")]
    Grid(#[from] GridError),
    #[error("{0}")]
    Invalid(String),
}

/// Monte Carlo defaults shared by `simulate` and the verification battery.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub mode: DeathMode,
    /// Censoring horizon override; `None` keeps the `20 / beta` default.
    pub t_max: Option<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_paths: 100_000,
            seed: 42,
            mode: DeathMode::SampleDeath,
            t_max: None,
        }
    }
}

/// Knobs for the verification battery.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyConfig {
    /// Explicit Lyapunov exponent; `None` uses half the critical value.
    /// Supplying an infeasible value makes the Lyapunov scan fail, which is
    /// what the sabotage fixtures exercise.
    pub lyapunov_p: Option<f64>,
}

/// Full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub market: MarketParams,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub mc: McConfig,
    pub verify: VerifyConfig,
    pub output_dir: PathBuf,
    /// Worker threads for solver sweeps and path batches; 0 = auto.
    pub workers: usize,
}

struct RawEntry {
    line: usize,
    section: String,
    key: String,
    value: String,
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn tokenize(text: &str) -> Result<Vec<RawEntry>, ConfigError> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = strip_comment(raw).trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.to_string(),
                });
            };
            section = name.trim().to_string();
            if !["market", "grid", "solver", "mc", "verify"].contains(&section.as_str()) {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: section,
                });
            }
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            });
        };
        entries.push(RawEntry {
            line,
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

fn parse_num<T: std::str::FromStr>(e: &RawEntry) -> Result<T, ConfigError> {
    e.value.parse::<T>().map_err(|_| ConfigError::BadValue {
        line: e.line,
        key: e.key.clone(),
        value: e.value.clone(),
    })
}

impl ExperimentConfig {
    /// Parses a config text. The `[market]` section must be complete; grid,
    /// solver, and Monte Carlo keys override their defaults per key.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let entries = tokenize(text)?;

        let market_pairs: Vec<(String, String)> = entries
            .iter()
            .filter(|e| e.section == "market")
            .map(|e| (e.key.clone(), e.value.clone()))
            .collect();
        let market = MarketParams::from_pairs(&market_pairs)?;

        let mut grid = GridSpec::default_for(&market);
        let mut solver = SolverConfig::default();
        let mut mc = McConfig::default();
        let mut verify = VerifyConfig::default();
        let mut output_dir = PathBuf::from("out");
        let mut workers = 0usize;

        for e in &entries {
            match (e.section.as_str(), e.key.as_str()) {
                ("market", _) => {}
                ("", "workers") => workers = parse_num(e)?,
                ("", "output_dir") => output_dir = PathBuf::from(&e.value),
                ("grid", "y_min") => grid.y_min = parse_num(e)?,
                ("grid", "y_max") => grid.y_max = parse_num(e)?,
                ("grid", "nx") => grid.nx = parse_num(e)?,
                ("grid", "ny") => grid.ny = parse_num(e)?,
                ("grid", "boundary_tol") => grid.boundary_tol = parse_num(e)?,
                ("solver", "max_iters") => solver.max_iters = parse_num(e)?,
                ("solver", "tol_sup") => solver.tol_sup = parse_num(e)?,
                ("solver", "tol_bind") => solver.tol_bind = parse_num(e)?,
                ("solver", "damping") => solver.damping = parse_num(e)?,
                ("mc", "dt") => mc.dt = parse_num(e)?,
                ("mc", "n_paths") => mc.n_paths = parse_num(e)?,
                ("mc", "seed") => mc.seed = parse_num(e)?,
                ("mc", "t_max") => mc.t_max = Some(parse_num(e)?),
                ("mc", "mode") => {
                    mc.mode = match e.value.as_str() {
                        "sample_death" => DeathMode::SampleDeath,
                        "discount_death" => DeathMode::DiscountDeath,
                        _ => {
                            return Err(ConfigError::BadValue {
                                line: e.line,
                                key: e.key.clone(),
                                value: e.value.clone(),
                            })
                        }
                    }
                }
                ("verify", "lyapunov_p") => verify.lyapunov_p = Some(parse_num(e)?),
                (section, _) => {
                    return Err(ConfigError::UnknownKey {
                        line: e.line,
                        section: section.to_string(),
                        key: e.key.clone(),
                    })
                }
            }
        }

        // Re-validate the grid window after overrides.
        let grid = GridSpec {
            boundary_tol: grid.boundary_tol,
            ..GridSpec::new(grid.y_min, grid.y_max, grid.nx, grid.ny)?
        };
        if mc.dt <= 0.0 {
            return Err(ConfigError::Invalid("mc dt must be positive".into()));
        }
        if solver.tol_sup <= 0.0 || solver.tol_bind < solver.tol_sup {
            return Err(ConfigError::Invalid(
                "solver tolerances must satisfy 0 < tol_sup <= tol_bind".into(),
            ));
        }
        if solver.damping <= 0.0 || solver.damping > 1.0 {
            return Err(ConfigError::Invalid(
                "solver damping must be in (0, 1]".into(),
            ));
        }

        Ok(Self {
            market,
            grid,
            solver,
            mc,
            verify,
            output_dir,
            workers,
        })
    }
}
