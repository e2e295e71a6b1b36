//! Market model: parameters, solvency-region geometry, and transaction arithmetic.
//!
//! An investor holds `x` in a money market earning rate `r` and `y` in a stock
//! with drift `alpha` and volatility `sigma`, consumes at rate `c`, and dies at
//! an exponential time with hazard rate `beta`. Buying stock costs a fraction
//! `lambda`, selling a fraction `mu`. The net cash obtainable by closing the
//! stock position is the liquidation value
//!
//! ```text
//! L(x, y) = x + (1 - mu) * max(y, 0) - max(-y, 0) / (1 - lambda)
//! ```
//!
//! and the state space of the control problem is the wedge `b < L(x, y) < c/r`
//! between the ruin level and the safe level.

use std::collections::BTreeMap;

use thiserror::Error;

/// Default geometric tolerance, in currency units, for boundary classification.
///
/// Far below any grid spacing used by the solver; it only absorbs round-off
/// when a point sits on the piecewise-linear boundary.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-9;

/// Validation failure when constructing [`MarketParams`].
#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter `{name}` must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("drift alpha ({alpha}) must exceed the risk-free rate r ({r})")]
    DriftBelowRate { alpha: f64, r: f64 },
    #[error("cost parameter `{name}` must lie in (0, 1), got {value}")]
    CostOutOfRange { name: &'static str, value: f64 },
    #[error("ruin level b ({b}) must be below the safe level c/r ({safe})")]
    RuinAboveSafe { b: f64, safe: f64 },
    #[error("parameter `{name}` is not a finite number")]
    NotFinite { name: &'static str },
    #[error("missing key `{0}` in market config")]
    MissingKey(String),
    #[error("unknown key `{0}` in market config")]
    UnknownKey(String),
    #[error("value for key `{key}` is not a number: `{value}`")]
    BadValue { key: String, value: String },
}

/// Model constants. Immutable after construction; validation is eager and
/// invalid sets are rejected rather than clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    /// Risk-free rate (1/time), > 0.
    pub r: f64,
    /// Stock drift (1/time), > r.
    pub alpha: f64,
    /// Stock volatility (1/sqrt(time)), > 0.
    pub sigma: f64,
    /// Hazard rate of the death time (1/time), > 0.
    pub beta: f64,
    /// Proportional cost on buys, in (0, 1).
    pub lambda: f64,
    /// Proportional cost on sells, in (0, 1).
    pub mu: f64,
    /// Consumption rate (currency/time), > 0.
    pub c: f64,
    /// Ruin level (currency), < c/r.
    pub b: f64,
}

/// Classification of a point relative to the solvency wedge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointClass {
    /// L < b - tol: already ruined.
    BelowRuin,
    /// |L - b| <= tol: on the ruin boundary.
    RuinBoundary,
    /// b + tol < L < c/r - tol.
    Interior,
    /// |L - c/r| <= tol: on the safe boundary.
    SafeBoundary,
    /// L > c/r + tol: consumption sustainable forever.
    Safe,
}

/// Direction of a transaction.
///
/// A buy of size `h` moves the state along `(-1, 1-lambda)`; a sell of size
/// `h` moves it along `(1-mu, -1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TradeAction {
    Buy,
    Sell,
}

impl MarketParams {
    /// Validates and constructs a parameter set.
    pub fn new(
        r: f64,
        alpha: f64,
        sigma: f64,
        beta: f64,
        lambda: f64,
        mu: f64,
        c: f64,
        b: f64,
    ) -> Result<Self, ParamError> {
        for (name, value) in [
            ("r", r),
            ("alpha", alpha),
            ("sigma", sigma),
            ("beta", beta),
            ("lambda", lambda),
            ("mu", mu),
            ("c", c),
            ("b", b),
        ] {
            if !value.is_finite() {
                return Err(ParamError::NotFinite { name });
            }
        }
        for (name, value) in [("r", r), ("sigma", sigma), ("beta", beta), ("c", c)] {
            if value <= 0.0 {
                return Err(ParamError::NotPositive { name, value });
            }
        }
        if alpha <= r {
            return Err(ParamError::DriftBelowRate { alpha, r });
        }
        for (name, value) in [("lambda", lambda), ("mu", mu)] {
            if value <= 0.0 || value >= 1.0 {
                return Err(ParamError::CostOutOfRange { name, value });
            }
        }
        if b >= c / r {
            return Err(ParamError::RuinAboveSafe { b, safe: c / r });
        }
        Ok(Self {
            r,
            alpha,
            sigma,
            beta,
            lambda,
            mu,
            c,
            b,
        })
    }

    /// Constructs without validation. Test hook for limit cases such as
    /// `sigma = 0` that the public constructor rejects.
    #[doc(hidden)]
    pub fn new_unchecked(
        r: f64,
        alpha: f64,
        sigma: f64,
        beta: f64,
        lambda: f64,
        mu: f64,
        c: f64,
        b: f64,
    ) -> Self {
        Self {
            r,
            alpha,
            sigma,
            beta,
            lambda,
            mu,
            c,
            b,
        }
    }

    /// The safe level `c/r`: with liquidation value at or above it, interest
    /// alone sustains consumption and ruin is impossible.
    pub fn safe_level(&self) -> f64 {
        self.c / self.r
    }

    /// Effective frictionless prices compatible with the bid-ask spread form
    /// the interval `[1-mu, 1/(1-lambda)]`; this is its midpoint.
    pub fn midpoint_k(&self) -> f64 {
        0.5 * ((1.0 - self.mu) + 1.0 / (1.0 - self.lambda))
    }

    /// Net cash from closing the stock position:
    /// `L(x,y) = x + (1-mu) y⁺ - y⁻ / (1-lambda)`.
    pub fn liquidation_value(&self, x: f64, y: f64) -> f64 {
        x + (1.0 - self.mu) * y.max(0.0) - (-y).max(0.0) / (1.0 - self.lambda)
    }

    /// Classifies `(x, y)` against the wedge with geometric tolerance `tol`.
    ///
    /// The if-chain makes the classification exhaustive and mutually
    /// exclusive for any `tol >= 0`; the ruin boundary wins over the safe
    /// boundary in the degenerate case of a tolerance wider than the wedge.
    pub fn classify_point(&self, x: f64, y: f64, tol: f64) -> PointClass {
        debug_assert!(tol >= 0.0);
        let l = self.liquidation_value(x, y);
        let safe = self.safe_level();
        if (l - self.b).abs() <= tol {
            PointClass::RuinBoundary
        } else if (l - safe).abs() <= tol {
            PointClass::SafeBoundary
        } else if l < self.b {
            PointClass::BelowRuin
        } else if l > safe {
            PointClass::Safe
        } else {
            PointClass::Interior
        }
    }

    /// Moves `(x, y)` by a transaction of size `h >= 0`.
    ///
    /// Buy: `(x - h, y + (1-lambda) h)`. Sell: `(x + (1-mu) h, y - h)`.
    pub fn transaction_shift(&self, x: f64, y: f64, action: TradeAction, h: f64) -> (f64, f64) {
        debug_assert!(h >= 0.0);
        match action {
            TradeAction::Buy => (x - h, y + (1.0 - self.lambda) * h),
            TradeAction::Sell => (x + (1.0 - self.mu) * h, y - h),
        }
    }

    /// Transaction sizes that close the stock position:
    /// `(buy, sell) = (y⁻ / (1-lambda), y⁺)`.
    ///
    /// Applying both shifts lands the state at `(L(x,y), 0)` exactly, up to
    /// floating-point round-off.
    pub fn full_liquidation_amounts(&self, y: f64) -> (f64, f64) {
        ((-y).max(0.0) / (1.0 - self.lambda), y.max(0.0))
    }

    /// Parses the flat key-value config format (`key = value` lines, `#`/`;`
    /// comments). All eight keys are required, unknown keys are an error.
    pub fn parse_config(text: &str) -> Result<Self, ParamError> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ParamError::BadValue {
                    key: line.to_string(),
                    value: String::new(),
                })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Builds a parameter set from `(key, value)` string pairs.
    ///
    /// Exact key names: `r`, `alpha`, `sigma`, `beta`, `lambda`, `mu`, `c`,
    /// `b`. Missing or unknown keys are errors.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ParamError> {
        const KEYS: [&str; 8] = ["r", "alpha", "sigma", "beta", "lambda", "mu", "c", "b"];
        let mut seen: BTreeMap<&str, f64> = BTreeMap::new();
        for (key, value) in pairs {
            let Some(&canonical) = KEYS.iter().find(|&&k| k == key.as_str()) else {
                return Err(ParamError::UnknownKey(key.clone()));
            };
            let parsed: f64 = value.parse().map_err(|_| ParamError::BadValue {
                key: key.clone(),
                value: value.clone(),
            })?;
            seen.insert(canonical, parsed);
        }
        for key in KEYS {
            if !seen.contains_key(key) {
                return Err(ParamError::MissingKey(key.to_string()));
            }
        }
        Self::new(
            seen["r"],
            seen["alpha"],
            seen["sigma"],
            seen["beta"],
            seen["lambda"],
            seen["mu"],
            seen["c"],
            seen["b"],
        )
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(pos) => &line[..pos],
        None => line,
    }
}
