//! Masked rectangular grid over a truncation of the solvency wedge.
//!
//! The lattice covers the bounding box of `{ b < L < c/r, y_min <= y <= y_max }`.
//! Nodes are classified pointwise against the wedge; nodes outside it are
//! masked out of solves but keep the Dirichlet extension values (1 below the
//! ruin level, 0 past the safe level) so stencils that reach across the free
//! boundary stay monotone. The artificial edges `y = y_min`, `y = y_max`
//! carry the liquidate-and-hold upper bound as Dirichlet data, which keeps
//! the truncated solution an upper-biased approximation near the edges.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::closed_form::{upper_bound_psi_clamped, wedge_x_range};
use crate::market::{MarketParams, PointClass, DEFAULT_BOUNDARY_TOL};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid spec invalid: {0}")]
    BadSpec(String),
    #[error("wedge intersected with the grid has no interior node")]
    NoInteriorNode,
    #[error("value file row {row}: {message}")]
    BadValueRow { row: usize, message: String },
}

/// Discretization request: the y-truncation window and node counts.
///
/// Node counts are interpreted so that "refining by 2x" doubles the interval
/// count (`nx -> 2 nx - 1`), which makes consecutive refinements nested.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    /// Geometric tolerance for boundary classification.
    pub boundary_tol: f64,
}

impl GridSpec {
    pub fn new(y_min: f64, y_max: f64, nx: usize, ny: usize) -> Result<Self, GridError> {
        if !(y_min.is_finite() && y_max.is_finite()) {
            return Err(GridError::BadSpec("y bounds must be finite".into()));
        }
        if !(y_min < 0.0 && 0.0 < y_max) {
            return Err(GridError::BadSpec(format!(
                "y range must straddle zero, got [{y_min}, {y_max}]"
            )));
        }
        if nx < 3 || ny < 3 {
            return Err(GridError::BadSpec(format!(
                "need at least 3 nodes per axis, got {nx} x {ny}"
            )));
        }
        Ok(Self {
            y_min,
            y_max,
            nx,
            ny,
            boundary_tol: DEFAULT_BOUNDARY_TOL,
        })
    }

    /// Default truncation window and resolution for a parameter set:
    /// `y in [-0.25 c/r, 1.5 c/r]`, 201 x 201 nodes.
    pub fn default_for(p: &MarketParams) -> Self {
        let safe = p.safe_level();
        Self::new(-0.25 * safe, 1.5 * safe, 201, 201).expect("default spec is valid")
    }

    /// Same window with both interval counts doubled; the refined node set
    /// contains this grid's nodes.
    pub fn refined(&self) -> Self {
        Self {
            nx: 2 * self.nx - 1,
            ny: 2 * self.ny - 1,
            ..*self
        }
    }
}

/// Node classification: the pointwise wedge classes plus the artificial
/// truncation edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    BelowRuin,
    RuinBoundary,
    Interior,
    SafeBoundary,
    Safe,
    Truncation,
}

impl NodeClass {
    /// Masked nodes are excluded from solves and CSV output.
    pub fn is_masked(self) -> bool {
        matches!(self, NodeClass::BelowRuin | NodeClass::Safe)
    }

    /// Nodes that carry Dirichlet data and are never updated by sweeps.
    pub fn is_fixed(self) -> bool {
        !matches!(self, NodeClass::Interior)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeClass::BelowRuin => "below_ruin",
            NodeClass::RuinBoundary => "ruin_boundary",
            NodeClass::Interior => "interior",
            NodeClass::SafeBoundary => "safe_boundary",
            NodeClass::Safe => "safe",
            NodeClass::Truncation => "truncation",
        }
    }
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<PointClass> for NodeClass {
    fn from(c: PointClass) -> Self {
        match c {
            PointClass::BelowRuin => NodeClass::BelowRuin,
            PointClass::RuinBoundary => NodeClass::RuinBoundary,
            PointClass::Interior => NodeClass::Interior,
            PointClass::SafeBoundary => NodeClass::SafeBoundary,
            PointClass::Safe => NodeClass::Safe,
        }
    }
}

/// Built lattice: geometry, per-node classification, and the active /
/// interior index lists. Immutable after construction.
#[derive(Debug)]
pub struct Grid {
    pub spec: GridSpec,
    pub params: MarketParams,
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub dy: f64,
    classes: Vec<NodeClass>,
    active: Vec<u32>,
    interior: Vec<u32>,
}

impl Grid {
    /// Builds and classifies the lattice.
    ///
    /// Classification is by liquidation value first, so the exact boundary
    /// conditions survive on nodes that also sit on a truncation edge; only
    /// L-interior nodes on the edge rows become `Truncation`.
    pub fn build(p: &MarketParams, spec: &GridSpec) -> Result<Arc<Grid>, GridError> {
        let (x_lo_top, _) = wedge_x_range(p, spec.y_max);
        let (_, x_hi_bottom) = wedge_x_range(p, spec.y_min);
        let x_min = x_lo_top;
        let x_max = x_hi_bottom;
        let dx = (x_max - x_min) / (spec.nx - 1) as f64;
        let dy = (spec.y_max - spec.y_min) / (spec.ny - 1) as f64;

        let mut classes = Vec::with_capacity(spec.nx * spec.ny);
        let mut active = Vec::new();
        let mut interior = Vec::new();
        for j in 0..spec.ny {
            let y = spec.y_min + j as f64 * dy;
            let edge_row = j == 0 || j == spec.ny - 1;
            for i in 0..spec.nx {
                let x = x_min + i as f64 * dx;
                let mut class: NodeClass = p.classify_point(x, y, spec.boundary_tol).into();
                if class == NodeClass::Interior && edge_row {
                    class = NodeClass::Truncation;
                }
                let idx = classes.len() as u32;
                if !class.is_masked() {
                    active.push(idx);
                }
                if class == NodeClass::Interior {
                    interior.push(idx);
                }
                classes.push(class);
            }
        }
        if interior.is_empty() {
            return Err(GridError::NoInteriorNode);
        }
        Ok(Arc::new(Grid {
            spec: *spec,
            params: *p,
            x_min,
            x_max,
            dx,
            dy,
            classes,
            active,
            interior,
        }))
    }

    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn ny(&self) -> usize {
        self.spec.ny
    }

    pub fn node_count(&self) -> usize {
        self.spec.nx * self.spec.ny
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.spec.nx + i
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.spec.nx, idx / self.spec.nx)
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn y(&self, j: usize) -> f64 {
        self.spec.y_min + j as f64 * self.dy
    }

    pub fn node_xy(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.coords(idx);
        (self.x(i), self.y(j))
    }

    pub fn class(&self, idx: usize) -> NodeClass {
        self.classes[idx]
    }

    pub fn classes(&self) -> &[NodeClass] {
        &self.classes
    }

    /// Indices of nodes inside the wedge or on its boundaries/truncation.
    pub fn active(&self) -> &[u32] {
        &self.active
    }

    /// Indices of nodes updated by solver sweeps.
    pub fn interior(&self) -> &[u32] {
        &self.interior
    }

    /// Cell containing `(x, y)` together with in-cell fractions, or `None`
    /// outside the lattice. Points on the far edges fall into the last cell.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize, f64, f64)> {
        let eps_x = 1e-9 * self.dx;
        let eps_y = 1e-9 * self.dy;
        if x < self.x_min - eps_x
            || x > self.x_max + eps_x
            || y < self.spec.y_min - eps_y
            || y > self.spec.y_max + eps_y
        {
            return None;
        }
        let fx = ((x - self.x_min) / self.dx).clamp(0.0, (self.spec.nx - 1) as f64);
        let fy = ((y - self.spec.y_min) / self.dy).clamp(0.0, (self.spec.ny - 1) as f64);
        let i = (fx.floor() as usize).min(self.spec.nx - 2);
        let j = (fy.floor() as usize).min(self.spec.ny - 2);
        Some((i, j, fx - i as f64, fy - j as f64))
    }

    /// Index of the lattice node nearest to `(x, y)`, or `None` outside.
    pub fn nearest_node(&self, x: f64, y: f64) -> Option<usize> {
        let (i, j, tx, ty) = self.locate(x, y)?;
        let ii = if tx < 0.5 { i } else { i + 1 };
        let jj = if ty < 0.5 { j } else { j + 1 };
        Some(self.index(ii, jj))
    }
}

/// Grid-indexed approximation of the value function.
#[derive(Debug, Clone)]
pub struct ValueField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ValueField {
    /// Field with boundary data assigned and interior values from `f`.
    ///
    /// Boundary data: ruin boundary 1, safe boundary 0, truncation edges the
    /// upper bound, masked nodes their Dirichlet extension (1 / 0). This
    /// assignment happens once; sweeps never touch fixed nodes.
    pub fn with_interior(grid: Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let p = grid.params;
        let values = (0..grid.node_count())
            .map(|idx| {
                let (x, y) = grid.node_xy(idx);
                match grid.class(idx) {
                    NodeClass::RuinBoundary | NodeClass::BelowRuin => 1.0,
                    NodeClass::SafeBoundary | NodeClass::Safe => 0.0,
                    NodeClass::Truncation => upper_bound_psi_clamped(&p, x, y).0,
                    NodeClass::Interior => f(x, y),
                }
            })
            .collect();
        Self { grid, values }
    }

    /// Interior initialized to the upper bound (supersolution start).
    pub fn from_upper_bound(grid: Arc<Grid>) -> Self {
        let p = grid.params;
        Self::with_interior(grid, move |x, y| upper_bound_psi_clamped(&p, x, y).0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    /// Bilinear sample at `(x, y)`, or `None` outside the lattice.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (i, j, tx, ty) = self.grid.locate(x, y)?;
        let g = &self.grid;
        let v00 = self.values[g.index(i, j)];
        let v10 = self.values[g.index(i + 1, j)];
        let v01 = self.values[g.index(i, j + 1)];
        let v11 = self.values[g.index(i + 1, j + 1)];
        Some(
            (1.0 - tx) * (1.0 - ty) * v00
                + tx * (1.0 - ty) * v10
                + (1.0 - tx) * ty * v01
                + tx * ty * v11,
        )
    }

    /// Writes `x,y,value,class`, one row per active node, floats with 17
    /// significant digits.
    pub fn write_csv<W: fmt::Write>(&self, out: &mut W) -> fmt::Result {
        writeln!(out, "x,y,value,class")?;
        for &idx in self.grid.active() {
            let idx = idx as usize;
            let (x, y) = self.grid.node_xy(idx);
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{}",
                x,
                y,
                self.values[idx],
                self.grid.class(idx)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        self.write_csv(&mut s).expect("string write cannot fail");
        s
    }

    /// Reads a `x,y,value,class` file back onto a grid built from the same
    /// spec. Every active node must be covered exactly once.
    pub fn read_csv(grid: Arc<Grid>, text: &str) -> Result<Self, GridError> {
        let mut field = ValueField::with_interior(grid.clone(), |_, _| f64::NAN);
        let mut seen = vec![false; grid.node_count()];
        for (row, line) in text.lines().enumerate() {
            if row == 0 {
                if line.trim() != "x,y,value,class" {
                    return Err(GridError::BadValueRow {
                        row,
                        message: format!("unexpected header `{line}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut next_f64 = |name: &str| -> Result<f64, GridError> {
                parts
                    .next()
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| GridError::BadValueRow {
                        row,
                        message: format!("missing or invalid `{name}`"),
                    })
            };
            let x = next_f64("x")?;
            let y = next_f64("y")?;
            let value = next_f64("value")?;
            let idx = grid
                .nearest_node(x, y)
                .ok_or_else(|| GridError::BadValueRow {
                    row,
                    message: format!("point ({x}, {y}) outside the lattice"),
                })?;
            let (nx_, ny_) = grid.node_xy(idx);
            if (nx_ - x).abs() > 1e-6 * grid.dx || (ny_ - y).abs() > 1e-6 * grid.dy {
                return Err(GridError::BadValueRow {
                    row,
                    message: format!("point ({x}, {y}) does not match a lattice node"),
                });
            }
            field.values[idx] = value;
            seen[idx] = true;
        }
        for &idx in grid.active() {
            if !seen[idx as usize] {
                return Err(GridError::BadValueRow {
                    row: 0,
                    message: format!("active node {idx} missing from file"),
                });
            }
        }
        Ok(field)
    }
}

/// Per-node policy label extracted from a converged field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionLabel {
    NoTrade,
    Buy,
    Sell,
    Boundary,
}

impl RegionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionLabel::NoTrade => "no_trade",
            RegionLabel::Buy => "buy",
            RegionLabel::Sell => "sell",
            RegionLabel::Boundary => "boundary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "no_trade" => Some(RegionLabel::NoTrade),
            "buy" => Some(RegionLabel::Buy),
            "sell" => Some(RegionLabel::Sell),
            "boundary" => Some(RegionLabel::Boundary),
            _ => None,
        }
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Buy / sell / no-trade partition of the active nodes.
#[derive(Debug, Clone)]
pub struct RegionMap {
    grid: Arc<Grid>,
    labels: Vec<RegionLabel>,
}

impl RegionMap {
    pub fn new(grid: Arc<Grid>, labels: Vec<RegionLabel>) -> Self {
        assert_eq!(labels.len(), grid.node_count());
        Self { grid, labels }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn label(&self, idx: usize) -> RegionLabel {
        self.labels[idx]
    }

    pub fn labels(&self) -> &[RegionLabel] {
        &self.labels
    }

    pub fn count(&self, label: RegionLabel) -> usize {
        self.grid
            .interior()
            .iter()
            .filter(|&&idx| self.labels[idx as usize] == label)
            .count()
    }

    /// Writes `x,y,region`, one row per active node.
    pub fn write_csv<W: fmt::Write>(&self, out: &mut W) -> fmt::Result {
        writeln!(out, "x,y,region")?;
        for &idx in self.grid.active() {
            let idx = idx as usize;
            let (x, y) = self.grid.node_xy(idx);
            writeln!(out, "{:.16e},{:.16e},{}", x, y, self.labels[idx])?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        self.write_csv(&mut s).expect("string write cannot fail");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::upper_bound_psi;

    fn reference_params() -> MarketParams {
        MarketParams::new(0.04, 0.08, 0.2, 0.04, 0.1, 0.1, 1.0, 0.0).unwrap()
    }

    #[test]
    fn classification_matches_pointwise_rule_and_partitions() {
        let p = reference_params();
        let spec = GridSpec::new(-2.0, 6.0, 7, 5).unwrap();
        let grid = Grid::build(&p, &spec).unwrap();
        let mut counts = [0usize; 6];
        for idx in 0..grid.node_count() {
            let (x, y) = grid.node_xy(idx);
            let (i, j) = grid.coords(idx);
            let pointwise: NodeClass = p.classify_point(x, y, spec.boundary_tol).into();
            let expected = if pointwise == NodeClass::Interior && (j == 0 || j == spec.ny - 1) {
                NodeClass::Truncation
            } else {
                pointwise
            };
            assert_eq!(grid.class(idx), expected, "node {idx} at ({x}, {y}), i={i}");
            counts[match grid.class(idx) {
                NodeClass::BelowRuin => 0,
                NodeClass::RuinBoundary => 1,
                NodeClass::Interior => 2,
                NodeClass::SafeBoundary => 3,
                NodeClass::Safe => 4,
                NodeClass::Truncation => 5,
            }] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), grid.node_count());
        assert_eq!(grid.interior().len(), counts[2]);
        assert!(counts[2] > 0);
    }

    #[test]
    fn boundary_nodes_detected_within_tolerance() {
        let p = reference_params();
        let spec = GridSpec::new(-5.0, 20.0, 11, 11).unwrap();
        let grid = Grid::build(&p, &spec).unwrap();
        // A point at distance tol/2 from the ruin level classifies as boundary.
        let tol = spec.boundary_tol;
        assert_eq!(
            p.classify_point(p.b + tol / 2.0, 0.0, tol),
            PointClass::RuinBoundary
        );
        // Grid corners: the top-left node sits exactly on the ruin line.
        let top_left = grid.index(0, grid.ny() - 1);
        assert_eq!(grid.class(top_left), NodeClass::RuinBoundary);
    }

    #[test]
    fn build_is_deterministic() {
        let p = reference_params();
        let spec = GridSpec::default_for(&p);
        let a = Grid::build(&p, &spec).unwrap();
        let b = Grid::build(&p, &spec).unwrap();
        assert_eq!(a.classes(), b.classes());
        assert_eq!(a.x_min.to_bits(), b.x_min.to_bits());
        assert_eq!(a.dx.to_bits(), b.dx.to_bits());
    }

    #[test]
    fn refinement_nests_nodes() {
        let p = reference_params();
        let coarse_spec = GridSpec::new(-6.25, 37.5, 51, 41).unwrap();
        let fine_spec = coarse_spec.refined();
        assert_eq!(fine_spec.nx, 101);
        assert_eq!(fine_spec.ny, 81);
        let coarse = Grid::build(&p, &coarse_spec).unwrap();
        let fine = Grid::build(&p, &fine_spec).unwrap();
        for i in 0..coarse.nx() {
            assert_eq!(coarse.x(i).to_bits(), fine.x(2 * i).to_bits());
        }
        for j in 0..coarse.ny() {
            assert_eq!(coarse.y(j).to_bits(), fine.y(2 * j).to_bits());
        }
    }

    #[test]
    fn no_interior_node_is_an_error() {
        // Wedge much thinner than the spacing: every non-edge node is masked.
        let p = MarketParams::new(0.04, 0.08, 0.2, 0.04, 0.1, 0.1, 1.0, 24.99).unwrap();
        let spec = GridSpec::new(-1.0, 1.0, 3, 3).unwrap();
        assert!(matches!(
            Grid::build(&p, &spec),
            Err(GridError::NoInteriorNode)
        ));
    }

    #[test]
    fn boundary_values_follow_dirichlet_data() {
        let p = reference_params();
        let spec = GridSpec::new(-6.25, 37.5, 41, 41).unwrap();
        let grid = Grid::build(&p, &spec).unwrap();
        let field = ValueField::with_interior(grid.clone(), |_, _| 0.5);
        let mut saw = (false, false, false);
        for &idx in grid.active() {
            let idx = idx as usize;
            let (x, y) = grid.node_xy(idx);
            match grid.class(idx) {
                NodeClass::RuinBoundary => {
                    assert_eq!(field.values()[idx], 1.0);
                    saw.0 = true;
                }
                NodeClass::SafeBoundary => {
                    assert_eq!(field.values()[idx], 0.0);
                    saw.1 = true;
                }
                NodeClass::Truncation => {
                    assert_eq!(field.values()[idx], upper_bound_psi(&p, x, y).unwrap());
                    saw.2 = true;
                }
                _ => {}
            }
        }
        assert!(saw.0 && saw.1 && saw.2, "expected all boundary kinds: {saw:?}");
    }

    #[test]
    fn csv_round_trip() {
        let p = reference_params();
        let spec = GridSpec::new(-3.0, 10.0, 9, 9).unwrap();
        let grid = Grid::build(&p, &spec).unwrap();
        let field = ValueField::with_interior(grid.clone(), |x, y| {
            upper_bound_psi_clamped(&p, x, y).0 * 0.5
        });
        let csv = field.to_csv_string();
        assert!(csv.starts_with("x,y,value,class\n"));
        let back = ValueField::read_csv(grid.clone(), &csv).unwrap();
        for &idx in grid.active() {
            assert_eq!(
                field.values()[idx as usize].to_bits(),
                back.values()[idx as usize].to_bits()
            );
        }
        assert!(ValueField::read_csv(grid, "x,y,value\n").is_err());
    }

    #[test]
    fn bilinear_sample_reproduces_nodes_and_interpolates() {
        let p = reference_params();
        let spec = GridSpec::new(-3.0, 10.0, 9, 9).unwrap();
        let grid = Grid::build(&p, &spec).unwrap();
        // A plane is reproduced exactly by bilinear interpolation.
        let field = ValueField::from_values(
            grid.clone(),
            (0..grid.node_count())
                .map(|idx| {
                    let (x, y) = grid.node_xy(idx);
                    0.3 * x - 0.1 * y + 2.0
                })
                .collect(),
        );
        let (x, y) = (grid.x(3) + 0.37 * grid.dx, grid.y(5) + 0.81 * grid.dy);
        let v = field.sample(x, y).unwrap();
        assert!((v - (0.3 * x - 0.1 * y + 2.0)).abs() < 1e-12);
        assert!(field.sample(grid.x_max + 1.0, 0.0).is_none());
    }
}
