//! Monte Carlo simulation of the controlled wealth dynamics under
//! declarative strategies.
//!
//! Between transactions the position follows
//!
//! ```text
//! dX = (r X - c) dt                      (money market, consumption drain)
//! dY = alpha Y dt + sigma Y dW           (stock)
//! ```
//!
//! discretized by Euler-Maruyama. A strategy may add singular transactions:
//! these are realized as discrete jumps (at most one direction per step
//! instant), moving along the buy/sell vectors of the market model. A path
//! ends on ruin (liquidation value at or below `b`), safety (at or above
//! `c/r`, after which ruin is impossible and the path contributes 0), death,
//! or the censoring horizon.
//!
//! Paths are embarrassingly parallel. Each path draws from its own
//! counter-derived stream keyed by `(seed, path index)`, and aggregation uses
//! a fixed pairwise summation, so estimates are bitwise identical for any
//! worker count.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::closed_form::{
    frictionless_psi_k_clamped, lower_bound_psi_clamped, upper_bound_psi_clamped,
    ClosedFormConstants,
};
use crate::grid::{RegionLabel, RegionMap};
use crate::market::{MarketParams, TradeAction};

/// Declarative trading policy.
#[derive(Debug, Clone)]
pub enum StrategySpec {
    /// Close the stock position immediately and never trade again. Realizes
    /// the upper bound.
    LiquidateNow,
    /// Never trade.
    NoTransaction,
    /// Jump to the no-trade region whenever the current point carries a
    /// buy or sell label. Expects a converged region map.
    FeedbackRegionMap(Arc<RegionMap>),
}

/// How the exponential death time enters the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeathMode {
    /// Draw the death time up front and kill the path at that clock.
    SampleDeath,
    /// Never kill; a ruin at time `t` contributes `exp(-beta t)`. Unbiased
    /// for the ruin-before-death probability since the death time is
    /// independent of the market path.
    DiscountDeath,
}

/// One trajectory's position, clock, and transaction ledger.
#[derive(Debug, Clone, Copy)]
pub struct PathState {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    /// Death is absorbing; every value function evaluates to 0 once false.
    pub alive: bool,
    /// Cumulative money withdrawn to buy stock (nondecreasing).
    pub cum_buy: f64,
    /// Cumulative stock sold (nondecreasing).
    pub cum_sell: f64,
}

impl PathState {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            t: 0.0,
            alive: true,
            cum_buy: 0.0,
            cum_sell: 0.0,
        }
    }

    /// Applies a transaction jump, keeping the ledger. Buy and sell are
    /// never both positive at one step instant.
    fn transact(&mut self, p: &MarketParams, action: TradeAction, h: f64) {
        if h <= 0.0 {
            return;
        }
        let (x, y) = p.transaction_shift(self.x, self.y, action, h);
        self.x = x;
        self.y = y;
        match action {
            TradeAction::Buy => self.cum_buy += h,
            TradeAction::Sell => self.cum_sell += h,
        }
    }
}

/// Terminal classification of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathExit {
    Ruin,
    Safe,
    Death,
    /// Hit the censoring horizon (or the martingale-test horizon).
    Horizon,
}

/// Terminal state plus exit kind.
#[derive(Debug, Clone, Copy)]
pub struct PathResult {
    pub state: PathState,
    pub exit: PathExit,
    /// A feedback jump failed to bracket inside the truncated domain.
    pub flagged: bool,
}

/// Step size and horizons for path simulation.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Euler step (model time units).
    pub dt: f64,
    pub mode: DeathMode,
    /// Censoring horizon; `None` means `20 / beta`, at which the surviving
    /// mass of the liquidation benchmark is below `e^-20`.
    pub t_max: Option<f64>,
}

impl SimOptions {
    pub fn new(dt: f64, mode: DeathMode) -> Self {
        Self {
            dt,
            mode,
            t_max: None,
        }
    }

    fn horizon(&self, p: &MarketParams) -> f64 {
        self.t_max.unwrap_or(20.0 / p.beta)
    }
}

impl Default for SimOptions {
    fn default() -> Self {
        Self::new(1e-3, DeathMode::SampleDeath)
    }
}

/// Counter-derived stream for one path: `(seed, path index)` is expanded by
/// a SplitMix64 chain into a 256-bit ChaCha key. Reproducibility is
/// per-(seed, index), independent of how paths are scheduled over workers.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha12Rng {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut s = seed.wrapping_mul(GOLDEN) ^ path_index.wrapping_add(GOLDEN);
    let mut next = move || {
        s = s.wrapping_add(GOLDEN);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&next().to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Deterministic pairwise summation (identical for any worker count, since
/// it runs over the collected per-path array in index order).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// One Euler-Maruyama step of the uncontrolled dynamics.
///
/// `y = 0` is preserved exactly (multiplicative noise vanishes there, and no
/// variate is consumed), so a liquidated path stays liquidated.
pub fn step_diffusion(state: &mut PathState, p: &MarketParams, dt: f64, rng: &mut ChaCha12Rng) {
    debug_assert!(state.alive && dt > 0.0);
    state.x += (p.r * state.x - p.c) * dt;
    if state.y != 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        state.y += p.alpha * state.y * dt + p.sigma * state.y * dt.sqrt() * z;
    }
    state.t += dt;
}

/// Applies one strategy decision at the current instant. Returns `true` if a
/// feedback jump could not be resolved inside the truncated domain (the path
/// is then flagged and continues untraded).
pub fn apply_strategy(state: &mut PathState, strat: &StrategySpec, p: &MarketParams) -> bool {
    debug_assert!(state.alive);
    match strat {
        StrategySpec::NoTransaction => false,
        StrategySpec::LiquidateNow => {
            // After the first call y is exactly 0 and both amounts vanish.
            let (buy, sell) = p.full_liquidation_amounts(state.y);
            debug_assert!(!(buy > 0.0 && sell > 0.0));
            state.transact(p, TradeAction::Buy, buy);
            state.transact(p, TradeAction::Sell, sell);
            false
        }
        StrategySpec::FeedbackRegionMap(map) => apply_feedback(state, map, p),
    }
}

fn label_at(map: &RegionMap, x: f64, y: f64) -> Option<RegionLabel> {
    map.grid().nearest_node(x, y).map(|idx| map.label(idx))
}

/// Jump to the no-trade boundary: find the minimal transaction size whose
/// landing label is no longer the current trade label, by doubling then
/// bisection to the grid-scale tolerance, and land on the far side.
fn apply_feedback(state: &mut PathState, map: &RegionMap, p: &MarketParams) -> bool {
    let action = match label_at(map, state.x, state.y) {
        Some(RegionLabel::Buy) => TradeAction::Buy,
        Some(RegionLabel::Sell) => TradeAction::Sell,
        _ => return false,
    };
    let grid = map.grid();
    let h_tol = 1e-3 * grid.dx.min(grid.dy);
    let trade_label = match action {
        TradeAction::Buy => RegionLabel::Buy,
        TradeAction::Sell => RegionLabel::Sell,
    };
    let still_trading = |h: f64| -> bool {
        let (x, y) = p.transaction_shift(state.x, state.y, action, h);
        label_at(map, x, y) == Some(trade_label)
    };
    // Bracket: double until the landing label changes. The domain diameter
    // bounds any sensible jump.
    let h_cap = (grid.x_max - grid.x_min) + (grid.spec.y_max - grid.spec.y_min);
    let mut hi = h_tol;
    while still_trading(hi) {
        hi *= 2.0;
        if hi > h_cap {
            return true;
        }
    }
    let mut lo = 0.0;
    while hi - lo > h_tol {
        let mid = 0.5 * (lo + hi);
        if still_trading(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Landing on the non-trading side; one tolerance earlier still trades.
    debug_assert!({
        let (x, y) = p.transaction_shift(state.x, state.y, action, hi);
        label_at(map, x, y) != Some(trade_label)
    });
    state.transact(p, action, hi);
    false
}

/// Runs one path until ruin, safety, death, or the horizon.
///
/// Within one step instant the order is: death check, exit checks on the
/// current position, strategy jump, diffusion step. Ruin is detected from
/// the post-step position (overshoot accepted, bias one step toward later
/// detection).
pub fn simulate_path(
    p: &MarketParams,
    strat: &StrategySpec,
    x0: f64,
    y0: f64,
    opts: &SimOptions,
    rng: &mut ChaCha12Rng,
) -> PathResult {
    assert!(
        p.liquidation_value(x0, y0) >= p.b,
        "initial point outside the closed solvency region"
    );
    let t_max = opts.horizon(p);
    let death_time = match opts.mode {
        DeathMode::SampleDeath => {
            let u: f64 = rng.gen::<f64>();
            -(1.0 - u).ln() / p.beta
        }
        DeathMode::DiscountDeath => f64::INFINITY,
    };
    let mut state = PathState::new(x0, y0);
    let mut flagged = false;
    loop {
        if state.t >= death_time {
            state.alive = false;
            return PathResult {
                state,
                exit: PathExit::Death,
                flagged,
            };
        }
        let l = p.liquidation_value(state.x, state.y);
        if l <= p.b {
            return PathResult {
                state,
                exit: PathExit::Ruin,
                flagged,
            };
        }
        if l >= p.safe_level() {
            return PathResult {
                state,
                exit: PathExit::Safe,
                flagged,
            };
        }
        if state.t >= t_max {
            return PathResult {
                state,
                exit: PathExit::Horizon,
                flagged,
            };
        }
        flagged |= apply_strategy(&mut state, strat, p);
        step_diffusion(&mut state, p, opts.dt, rng);
    }
}

/// Ruin-probability estimate over independent paths.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MCResult {
    pub estimate: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub n_ruin: usize,
    pub n_safe: usize,
    pub n_death: usize,
    /// Paths cut at the horizon (contribute 0).
    pub censored: usize,
    /// Paths with a failed feedback bracket.
    #[serde(skip)]
    pub flagged: usize,
}

fn outcome_value(p: &MarketParams, mode: DeathMode, res: &PathResult) -> f64 {
    match (res.exit, mode) {
        (PathExit::Ruin, DeathMode::SampleDeath) => 1.0,
        (PathExit::Ruin, DeathMode::DiscountDeath) => (-p.beta * res.state.t).exp(),
        _ => 0.0,
    }
}

/// Estimates the ruin-before-death probability of one fixed strategy.
///
/// Deterministic for a fixed seed: per-path streams are keyed by
/// `(seed, path index)` and the reduction is pairwise over path order.
pub fn estimate_ruin_probability(
    p: &MarketParams,
    strat: &StrategySpec,
    x0: f64,
    y0: f64,
    opts: &SimOptions,
    n_paths: usize,
    seed: u64,
) -> MCResult {
    assert!(n_paths >= 100, "need at least 100 paths");
    let results: Vec<PathResult> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            simulate_path(p, strat, x0, y0, opts, &mut rng)
        })
        .collect();
    let outcomes: Vec<f64> = results
        .iter()
        .map(|r| outcome_value(p, opts.mode, r))
        .collect();
    let n = n_paths as f64;
    let estimate = pairwise_sum(&outcomes) / n;
    let sq: Vec<f64> = outcomes
        .iter()
        .map(|v| (v - estimate) * (v - estimate))
        .collect();
    let stderr = (pairwise_sum(&sq) / (n - 1.0)).sqrt() / n.sqrt();
    let count = |exit: PathExit| results.iter().filter(|r| r.exit == exit).count();
    MCResult {
        estimate,
        stderr,
        n_paths,
        n_ruin: count(PathExit::Ruin),
        n_safe: count(PathExit::Safe),
        n_death: count(PathExit::Death),
        censored: count(PathExit::Horizon),
        flagged: results.iter().filter(|r| r.flagged).count(),
    }
}

/// Closed-form candidate for the martingale tests.
#[derive(Debug, Clone, Copy)]
pub enum BoundCandidate {
    /// The liquidate-and-hold upper bound.
    UpperBound,
    /// Frictionless bound at an effective price.
    FrictionlessK(f64),
    /// The supremum of the frictionless bounds.
    LowerBound,
}

impl BoundCandidate {
    /// Evaluates the candidate with the coffin-state extension (0 when dead)
    /// and below-ruin clamping to the boundary value 1. Returns the value
    /// and whether clamping occurred.
    pub fn eval(
        &self,
        p: &MarketParams,
        cf: &ClosedFormConstants,
        state: &PathState,
    ) -> (f64, bool) {
        if !state.alive {
            return (0.0, false);
        }
        match *self {
            BoundCandidate::UpperBound => upper_bound_psi_clamped(p, state.x, state.y),
            BoundCandidate::FrictionlessK(k) => {
                frictionless_psi_k_clamped(p, cf, k, state.x, state.y)
            }
            BoundCandidate::LowerBound => lower_bound_psi_clamped(p, cf, state.x, state.y),
        }
    }
}

/// Direction of the martingale hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MartingaleDirection {
    /// Supermartingale: stopped mean must not exceed the initial value.
    Super,
    /// Submartingale: stopped mean must not fall below the initial value.
    Sub,
}

/// Outcome of one statistical super/submartingale test.
#[derive(Debug, Clone, Copy)]
pub struct MartingaleReport {
    pub direction: MartingaleDirection,
    /// Candidate value at the start point.
    pub v0: f64,
    /// Sample mean of the candidate at the stopped state.
    pub mean: f64,
    pub stderr: f64,
    /// `(mean - v0) / stderr`.
    pub z: f64,
    pub pass: bool,
    pub n_paths: usize,
    /// Below-ruin clamps during candidate evaluation.
    pub clamped: usize,
}

/// Tests `E[v(X_rho, Y_rho)] <= v(x0, y0)` (Super) or `>=` (Sub) at the
/// 3-sigma level, with the stopping rule
/// `rho = min(horizon, ruin exit, safe exit, sampled death)`.
#[allow(clippy::too_many_arguments)]
pub fn martingale_test(
    p: &MarketParams,
    candidate: BoundCandidate,
    strat: &StrategySpec,
    x0: f64,
    y0: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    direction: MartingaleDirection,
    seed: u64,
) -> MartingaleReport {
    let cf = ClosedFormConstants::from_params(p);
    let opts = SimOptions {
        dt,
        mode: DeathMode::SampleDeath,
        t_max: Some(horizon),
    };
    let evals: Vec<(f64, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let res = simulate_path(p, strat, x0, y0, &opts, &mut rng);
            candidate.eval(p, &cf, &res.state)
        })
        .collect();
    let values: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let n = n_paths as f64;
    let mean = pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let stderr = (pairwise_sum(&sq) / (n - 1.0)).sqrt() / n.sqrt();
    let start = PathState::new(x0, y0);
    let (v0, _) = candidate.eval(p, &cf, &start);
    let z = if stderr > 0.0 { (mean - v0) / stderr } else { 0.0 };
    let pass = match direction {
        MartingaleDirection::Super => mean <= v0 + 3.0 * stderr,
        MartingaleDirection::Sub => mean >= v0 - 3.0 * stderr,
    };
    MartingaleReport {
        direction,
        v0,
        mean,
        stderr,
        z,
        pass,
        n_paths,
        clamped: evals.iter().filter(|e| e.1).count(),
    }
}

/// Deterministic hitting time of the ruin level for a liquidated position:
/// `c - r X(t) = (c - r X0) e^{r t}` solved for `X(t) = b`. The probability
/// of dying after it equals the liquidate-and-hold ruin probability.
pub fn liquidation_hitting_time(p: &MarketParams, l0: f64) -> f64 {
    (1.0 / p.r) * ((p.c - p.r * p.b) / (p.c - p.r * l0)).ln()
}
