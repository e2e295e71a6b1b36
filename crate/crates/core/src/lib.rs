//! Minimal probability of lifetime ruin under proportional transaction costs.
//!
//! An investor with a money-market account and a stock position, fixed
//! consumption, and an exponential lifetime wants to minimize the probability
//! that liquidated wealth hits a ruin level before death. Trading pays
//! proportional costs, so the optimal policy splits the solvency wedge into
//! buy, sell, and no-trade regions.
//!
//! The crate provides:
//!
//! - [`market`]: parameters, wedge geometry, liquidation and transaction
//!   arithmetic;
//! - [`closed_form`]: the explicit upper/lower bounds on the value function,
//!   the frictionless formulas, the Lyapunov strict subsolution, and an
//!   operator evaluator for smooth candidates;
//! - [`grid`]: the masked lattice over the truncated wedge with Dirichlet
//!   data;
//! - [`solver`]: the monotone fixed-point solver for the variational
//!   inequality and the region-map extraction;
//! - [`sim`]: Monte Carlo simulation of the controlled dynamics under
//!   declarative strategies, ruin-probability estimation, and statistical
//!   super/submartingale tests;
//! - [`config`]: the sectioned key-value experiment configuration shared by
//!   the command-line front end.

pub mod closed_form;
pub mod config;
pub mod grid;
pub mod market;
pub mod sim;
pub mod solver;

pub use closed_form::{
    build_lyapunov, frictionless_psi_k, lower_bound_psi, upper_bound_psi, vi_operator_eval,
    ClosedFormConstants, LyapunovSpec,
};
pub use grid::{Grid, GridSpec, NodeClass, RegionLabel, RegionMap, ValueField};
pub use market::{MarketParams, PointClass, TradeAction};
pub use solver::{solve, SolveReport, Solution, SolverConfig, ViSolver};
