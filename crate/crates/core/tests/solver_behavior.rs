//! Solver behavior against closed-form oracles on desk-scale grids.

use std::sync::Arc;

use ruin_core::closed_form::{
    lower_bound_psi_clamped, upper_bound_psi, upper_bound_psi_clamped, ClosedFormConstants,
};
use ruin_core::grid::{Grid, GridSpec, RegionLabel, ValueField};
use ruin_core::market::MarketParams;
use ruin_core::solver::{solve, SolverConfig, ViSolver};

fn reference_params() -> MarketParams {
    MarketParams::new(0.04, 0.08, 0.2, 0.04, 0.1, 0.1, 1.0, 0.0).unwrap()
}

/// Window with y = 0 on the lattice (one quarter of the rows below zero).
fn axis_spec(nx: usize, ny_intervals: usize) -> GridSpec {
    GridSpec::new(-10.0, 30.0, nx, ny_intervals + 1).unwrap()
}

/// Iterating the generator candidate alone on the y = 0 line is a 1-D scheme
/// whose solution converges to the liquidate-and-hold value at O(dx).
#[test]
fn diffusion_on_axis_converges_to_analytic_value() {
    // beta != r so the analytic restriction is genuinely curved.
    let p = MarketParams::new(0.04, 0.08, 0.2, 0.06, 0.1, 0.1, 1.0, 0.0).unwrap();

    let sup_error = |nx: usize| -> f64 {
        let spec = axis_spec(nx, 8);
        let grid = Grid::build(&p, &spec).unwrap();
        let solver = ViSolver::new(grid.clone(), SolverConfig::default());
        let j = (0.0 - grid.spec.y_min) / grid.dy;
        assert!((j - j.round()).abs() < 1e-9);
        let j = j.round() as usize;
        let row: Vec<usize> = grid
            .interior()
            .iter()
            .map(|&n| n as usize)
            .filter(|&n| grid.coords(n).1 == j)
            .collect();
        let mut field = ValueField::with_interior(grid.clone(), |_, _| 0.5);
        // The axis decouples from the rest of the grid: relax it directly.
        for _ in 0..200_000 {
            let mut delta = 0.0f64;
            for &node in &row {
                let new = solver.diffusion_fixed_point(&field, node);
                delta = delta.max((new - field.values()[node]).abs());
                field.values_mut()[node] = new;
            }
            if delta < 1e-13 {
                break;
            }
        }
        row.iter()
            .map(|&node| {
                let (x, _) = grid.node_xy(node);
                (field.values()[node] - upper_bound_psi(&p, x, 0.0).unwrap()).abs()
            })
            .fold(0.0, f64::max)
    };

    let coarse = sup_error(81);
    let fine = sup_error(161);
    assert!(coarse < 0.02, "coarse error {coarse}");
    assert!(fine < coarse, "no first-order decay: {fine} vs {coarse}");
}

/// The no-trade region shrinks as costs vanish and stays nonempty for
/// sizable costs; in the near-frictionless limit the trade regions cover
/// most of the wedge.
#[test]
fn no_trade_region_shrinks_with_costs() {
    let spec = GridSpec::new(-6.25, 37.5, 101, 101).unwrap();
    let mut nt_counts = Vec::new();
    for cost in [0.1, 0.01, 0.001] {
        let p = MarketParams::new(0.04, 0.08, 0.2, 0.04, cost, cost, 1.0, 0.0).unwrap();
        let solution = solve(&p, &spec, &SolverConfig::default()).unwrap();
        let nt = solution.regions.count(RegionLabel::NoTrade);
        let buy = solution.regions.count(RegionLabel::Buy);
        let sell = solution.regions.count(RegionLabel::Sell);
        let total = solution.field.grid().interior().len();
        assert_eq!(nt + buy + sell, total);
        if cost >= 0.01 {
            assert!(nt > 0, "no-trade region empty at cost {cost}");
        }
        nt_counts.push(nt);
    }
    assert!(
        nt_counts[0] > nt_counts[1] && nt_counts[1] > nt_counts[2],
        "no-trade region did not shrink: {nt_counts:?}"
    );
}

/// Iterations from the upper and lower bound land on the same fixed point.
#[test]
fn upper_and_lower_starts_agree() {
    let p = reference_params();
    let cf = ClosedFormConstants::from_params(&p);
    let spec = GridSpec::new(-6.25, 37.5, 51, 51).unwrap();
    let grid = Grid::build(&p, &spec).unwrap();
    let cfg = SolverConfig::default();
    let solver = ViSolver::new(grid.clone(), cfg);

    let from_upper = ValueField::from_upper_bound(grid.clone());
    let from_lower = ValueField::with_interior(grid.clone(), |x, y| {
        lower_bound_psi_clamped(&p, &cf, x, y).0
    });
    let (u, _) = solver.solve_from(from_upper).unwrap();
    let (l, _) = solver.solve_from(from_lower).unwrap();
    let gap = grid
        .interior()
        .iter()
        .map(|&n| (u.values()[n as usize] - l.values()[n as usize]).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 2.0 * cfg.tol_sup, "two-sided gap {gap:.3e}");
}

/// Region labels describe the converged field: walking one transaction step
/// from a labeled node changes the value within the binding tolerance, and
/// the solution stays inside the closed-form sandwich.
#[test]
fn labels_bind_and_solution_is_sandwiched() {
    let p = reference_params();
    let cf = ClosedFormConstants::from_params(&p);
    let spec = GridSpec::new(-6.25, 37.5, 101, 101).unwrap();
    let solution = solve(&p, &spec, &SolverConfig::default()).unwrap();
    let grid = solution.field.grid().clone();
    let solver = ViSolver::new(grid.clone(), SolverConfig::default());

    let mut buy_nodes = 0;
    for &node in grid.interior() {
        let node = node as usize;
        let (x, y) = grid.node_xy(node);
        let u = solution.field.values()[node];
        let lower = lower_bound_psi_clamped(&p, &cf, x, y).0;
        let upper = upper_bound_psi_clamped(&p, x, y).0;
        assert!(u >= lower - 0.03 && u <= upper + 0.03, "sandwich at ({x}, {y})");
        if solution.regions.label(node) == RegionLabel::Buy {
            let cand =
                solver.transaction_candidate(&solution.field, node, ruin_core::TradeAction::Buy);
            assert!((u - cand).abs() <= SolverConfig::default().tol_bind);
            buy_nodes += 1;
        }
    }
    assert!(buy_nodes > 0, "expected a buy region at 10% costs");
}

/// Refining the grid moves the solution towards the frictionless formula
/// when costs are tiny.
#[test]
fn near_frictionless_solution_approaches_psi_one() {
    let p = MarketParams::new(0.04, 0.08, 0.2, 0.04, 1e-4, 1e-4, 1.0, 0.0).unwrap();
    let cf = ClosedFormConstants::from_params(&p);
    let spec = GridSpec::new(-6.25, 37.5, 101, 101).unwrap();
    let solution = solve(&p, &spec, &SolverConfig::default()).unwrap();
    let grid = solution.field.grid().clone();
    let psi_one = |x: f64, y: f64| {
        let z = x + y;
        if z >= p.safe_level() {
            0.0
        } else {
            ruin_core::closed_form::frictionless_psi_k_clamped(&p, &cf, 1.0, x, y).0
        }
    };
    let sup = grid
        .interior()
        .iter()
        .map(|&n| {
            let (x, y) = grid.node_xy(n as usize);
            (solution.field.values()[n as usize] - psi_one(x, y)).abs()
        })
        .fold(0.0, f64::max);
    assert!(sup <= 0.03, "sup error vs frictionless formula: {sup}");
}

/// Nested refinement brings consecutive solutions closer on shared nodes.
#[test]
fn refinement_is_cauchy_on_shared_nodes() {
    let p = reference_params();
    let cfg = SolverConfig::default();
    let specs = [
        GridSpec::new(-6.25, 37.5, 26, 26).unwrap(),
        GridSpec::new(-6.25, 37.5, 51, 51).unwrap(),
        GridSpec::new(-6.25, 37.5, 101, 101).unwrap(),
    ];
    let fields: Vec<ValueField> = specs
        .iter()
        .map(|s| solve(&p, s, &cfg).unwrap().field)
        .collect();

    let diff_on_shared = |coarse: &ValueField, fine: &ValueField| -> f64 {
        let cg: &Arc<Grid> = coarse.grid();
        let fg = fine.grid();
        let mut sup = 0.0f64;
        for &n in cg.interior() {
            let (i, j) = cg.coords(n as usize);
            let fidx = fg.index(2 * i, 2 * j);
            if fg.class(fidx) == ruin_core::NodeClass::Interior {
                sup = sup.max(
                    (coarse.values()[n as usize] - fine.values()[fidx]).abs(),
                );
            }
        }
        sup
    };
    let d01 = diff_on_shared(&fields[0], &fields[1]);
    let d12 = diff_on_shared(&fields[1], &fields[2]);
    assert!(d12 < d01, "refinement differences not decreasing: {d01} vs {d12}");
}
