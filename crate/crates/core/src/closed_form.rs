//! Closed-form bounds on the minimal ruin probability and the Lyapunov
//! strict subsolution, plus a variational-inequality operator evaluator for
//! twice-differentiable candidate functions.
//!
//! The minimal ruin probability is sandwiched between two explicit functions
//! of the liquidation value `L`:
//!
//! ```text
//! ((c - r L)/(c - r b))^d  <=  psi(x, y)  <=  ((c - r L)/(c - r b))^(beta/r)
//! ```
//!
//! The upper bound is attained by liquidating immediately and never trading
//! again; the lower bound is the best frictionless ruin probability over all
//! effective prices `k` inside the bid-ask interval `[1-mu, 1/(1-lambda)]`.

use thiserror::Error;

use crate::market::MarketParams;

/// Domain failure when evaluating a closed-form expression.
#[derive(Debug, Error, PartialEq)]
pub enum ClosedFormError {
    #[error("liquidation value {l} lies below the ruin level {b}")]
    BelowRuin { l: f64, b: f64 },
    #[error("frictionless wealth {z} lies below the ruin level {b}")]
    WealthBelowRuin { z: f64, b: f64 },
    #[error("effective price k = {k} outside the bid-ask interval [{lo}, {hi}]")]
    PriceOutOfInterval { k: f64, lo: f64, hi: f64 },
    #[error("exponent p = {p} is not in (0, 1)")]
    ExponentOutOfRange { p: f64 },
    #[error("exponent p = {p} violates the strict-subsolution bound p < {p_max}")]
    ExponentTooLarge { p: f64, p_max: f64 },
}

/// Exponent constants shared by the frictionless formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormConstants {
    /// Exponent of the frictionless minimal ruin probability:
    /// `d = [(r + beta + R) + sqrt((r + beta + R)^2 - 4 r beta)] / (2 r)`.
    /// Always `> 1` and `>= beta/r` (strictly, since `R > 0` when `alpha > r`).
    pub d: f64,
    /// Half the squared market price of risk, `R = ((alpha - r)/sigma)^2 / 2`.
    pub sharpe_rate: f64,
}

impl ClosedFormConstants {
    /// Computes `(d, R)` from the model parameters.
    ///
    /// The discriminant `(r + beta + R)^2 - 4 r beta` equals
    /// `(r - beta + R)^2 + 4 beta R`, hence is nonnegative for any valid
    /// parameter set; a numeric guard keeps round-off from producing NaN.
    pub fn from_params(p: &MarketParams) -> Self {
        let sharpe = (p.alpha - p.r) / p.sigma;
        let rate = 0.5 * sharpe * sharpe;
        let s = p.r + p.beta + rate;
        let disc = (s * s - 4.0 * p.r * p.beta).max(0.0);
        let d = (s + disc.sqrt()) / (2.0 * p.r);
        debug_assert!(d > 1.0);
        debug_assert!(d >= p.beta / p.r);
        Self {
            d,
            sharpe_rate: rate,
        }
    }
}

fn normalized_base(p: &MarketParams, level: f64) -> f64 {
    // (c - r*level)/(c - r*b); clamped at 0 past the safe level.
    ((p.c - p.r * level) / (p.c - p.r * p.b)).max(0.0)
}

/// Ruin probability of the liquidate-immediately-and-hold strategy,
/// `((c - r L)/(c - r b))^(beta/r)`, an upper bound for the value function.
///
/// Returns 0 past the safe level and an error below the ruin level.
pub fn upper_bound_psi(p: &MarketParams, x: f64, y: f64) -> Result<f64, ClosedFormError> {
    let l = p.liquidation_value(x, y);
    if l < p.b {
        return Err(ClosedFormError::BelowRuin { l, b: p.b });
    }
    Ok(normalized_base(p, l).powf(p.beta / p.r))
}

/// As [`upper_bound_psi`], but a point below the ruin level evaluates to the
/// boundary value 1 instead of erroring. The flag reports whether clamping
/// happened, so callers can keep a warning count.
pub fn upper_bound_psi_clamped(p: &MarketParams, x: f64, y: f64) -> (f64, bool) {
    let l = p.liquidation_value(x, y);
    if l < p.b {
        (1.0, true)
    } else {
        (normalized_base(p, l).powf(p.beta / p.r), false)
    }
}

/// Minimal frictionless ruin probability at wealth `x + k y` for an
/// effective stock price `k` inside the bid-ask interval:
/// `((c - r (x + k y))/(c - r b))^d` on `[b, c/r]`, 0 above the safe level.
pub fn frictionless_psi_k(
    p: &MarketParams,
    cf: &ClosedFormConstants,
    k: f64,
    x: f64,
    y: f64,
) -> Result<f64, ClosedFormError> {
    let lo = 1.0 - p.mu;
    let hi = 1.0 / (1.0 - p.lambda);
    if !(lo..=hi).contains(&k) {
        return Err(ClosedFormError::PriceOutOfInterval { k, lo, hi });
    }
    let z = x + k * y;
    if z < p.b {
        return Err(ClosedFormError::WealthBelowRuin { z, b: p.b });
    }
    Ok(normalized_base(p, z).powf(cf.d))
}

/// As [`frictionless_psi_k`] with below-ruin wealth clamped to 1.
pub fn frictionless_psi_k_clamped(
    p: &MarketParams,
    cf: &ClosedFormConstants,
    k: f64,
    x: f64,
    y: f64,
) -> (f64, bool) {
    let z = x + k * y;
    if z < p.b {
        (1.0, true)
    } else {
        (normalized_base(p, z).powf(cf.d), false)
    }
}

/// Lower bound for the value function:
/// `sup_k psi_k(x, y) = ((c - r L)/(c - r b))^d`.
///
/// The supremum over the bid-ask interval is attained at whichever endpoint
/// matches the sign of `y`, and collapses to the liquidation value.
pub fn lower_bound_psi(
    p: &MarketParams,
    cf: &ClosedFormConstants,
    x: f64,
    y: f64,
) -> Result<f64, ClosedFormError> {
    let l = p.liquidation_value(x, y);
    if l < p.b {
        return Err(ClosedFormError::BelowRuin { l, b: p.b });
    }
    Ok(normalized_base(p, l).powf(cf.d))
}

/// As [`lower_bound_psi`] with below-ruin points clamped to 1.
pub fn lower_bound_psi_clamped(
    p: &MarketParams,
    cf: &ClosedFormConstants,
    x: f64,
    y: f64,
) -> (f64, bool) {
    let l = p.liquidation_value(x, y);
    if l < p.b {
        (1.0, true)
    } else {
        (normalized_base(p, l).powf(cf.d), false)
    }
}

/// A smooth, negative, coercive strict subsolution of the variational
/// inequality: `l(x, y) = h(x + k y)` with `h(z) = -(z - b + 1)^p / p`.
///
/// Used by the comparison argument; numerically, all three VI operators
/// applied to it are strictly negative on the wedge.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovSpec {
    /// Effective price, strictly inside `(1-mu, 1/(1-lambda))`.
    pub k: f64,
    /// Exponent in `(0, 1)` satisfying the strict-subsolution condition
    /// `beta > (theta^2 / (2 sigma^2 k^2)) * p / (1 - p)`.
    pub p: f64,
    /// Drift bound `theta = r/(1-lambda) + alpha k`.
    pub theta: f64,
    params: MarketParams,
}

/// Largest exponent compatible with the strict-subsolution condition:
/// solving `beta = (theta^2 / (2 sigma^2 k^2)) * p / (1 - p)` for `p`
/// gives `p_max = q / (1 + q)` with `q = 2 beta sigma^2 k^2 / theta^2`.
pub fn lyapunov_p_max(p: &MarketParams, k: f64) -> f64 {
    let theta = p.r / (1.0 - p.lambda) + p.alpha * k;
    let q = 2.0 * p.beta * p.sigma * p.sigma * k * k / (theta * theta);
    q / (1.0 + q)
}

/// Builds the Lyapunov subsolution.
///
/// If `p_exp` is absent, the exponent defaults to half the critical value,
/// which satisfies the strict inequality with margin. A supplied exponent is
/// validated against the condition instead.
pub fn build_lyapunov(
    p: &MarketParams,
    k: f64,
    p_exp: Option<f64>,
) -> Result<LyapunovSpec, ClosedFormError> {
    let lo = 1.0 - p.mu;
    let hi = 1.0 / (1.0 - p.lambda);
    if k <= lo || k >= hi {
        return Err(ClosedFormError::PriceOutOfInterval { k, lo, hi });
    }
    let p_max = lyapunov_p_max(p, k);
    let exponent = match p_exp {
        Some(v) => {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(ClosedFormError::ExponentOutOfRange { p: v });
            }
            if v >= p_max {
                return Err(ClosedFormError::ExponentTooLarge { p: v, p_max });
            }
            v
        }
        None => 0.5 * p_max,
    };
    Ok(LyapunovSpec {
        k,
        p: exponent,
        theta: p.r / (1.0 - p.lambda) + p.alpha * k,
        params: *p,
    })
}

impl LyapunovSpec {
    fn h_base(&self, x: f64, y: f64) -> f64 {
        // z - b + 1 >= 1 on the closed wedge since x + ky >= L(x, y) >= b.
        x + self.k * y - self.params.b + 1.0
    }

    /// `l(x, y) = -(x + k y - b + 1)^p / p`.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        -self.h_base(x, y).powf(self.p) / self.p
    }
}

/// The three operator values of the variational inequality
/// `max{ Lu, -(1-mu) u_x + u_y, u_x - (1-lambda) u_y } = 0`
/// evaluated on a smooth candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViOperatorValues {
    /// Generator part `beta f - (r x - c) f_x - alpha y f_y - (sigma^2 y^2 / 2) f_yy`.
    pub generator: f64,
    /// Sell-side gradient constraint `-(1-mu) f_x + f_y`.
    pub sell_gradient: f64,
    /// Buy-side gradient constraint `f_x - (1-lambda) f_y`.
    pub buy_gradient: f64,
}

impl ViOperatorValues {
    /// The max of the three components, i.e. the VI residual of the candidate.
    pub fn max(&self) -> f64 {
        self.generator.max(self.sell_gradient).max(self.buy_gradient)
    }
}

/// A scalar field with analytic value, gradient, and second y-derivative.
///
/// Meant for closed-form candidates; grid fields go through the discrete
/// residual in the solver instead.
pub trait SmoothField {
    fn value(&self, x: f64, y: f64) -> f64;
    /// `(f_x, f_y)`.
    fn gradient(&self, x: f64, y: f64) -> (f64, f64);
    /// `f_yy`.
    fn second_y(&self, x: f64, y: f64) -> f64;
}

/// Evaluates the three VI operators on a smooth candidate at `(x, y)`.
pub fn vi_operator_eval<F: SmoothField>(
    p: &MarketParams,
    f: &F,
    x: f64,
    y: f64,
) -> ViOperatorValues {
    let v = f.value(x, y);
    let (fx, fy) = f.gradient(x, y);
    let fyy = f.second_y(x, y);
    ViOperatorValues {
        generator: p.beta * v
            - (p.r * x - p.c) * fx
            - p.alpha * y * fy
            - 0.5 * p.sigma * p.sigma * y * y * fyy,
        sell_gradient: -(1.0 - p.mu) * fx + fy,
        buy_gradient: fx - (1.0 - p.lambda) * fy,
    }
}

/// The upper bound as a smooth field.
///
/// `L` has a kink at `y = 0`; there the sell-side slope is used. The
/// generator value on the `y = 0` line is unaffected because both
/// y-derivative terms carry a factor of `y`.
#[derive(Debug, Clone, Copy)]
pub struct UpperBoundField {
    pub params: MarketParams,
}

impl UpperBoundField {
    fn outer<'a>(&'a self) -> impl Fn(f64) -> (f64, f64, f64) + 'a {
        // value, first and second derivative of g(v) = base(v)^(beta/r) in v = L.
        let p = &self.params;
        let e = p.beta / p.r;
        let scale = p.c - p.r * p.b;
        move |l: f64| {
            let base = ((p.c - p.r * l) / scale).max(0.0);
            let g = base.powf(e);
            let g1 = -e * p.r / scale * base.powf(e - 1.0);
            let g2 = e * (e - 1.0) * (p.r / scale) * (p.r / scale) * base.powf(e - 2.0);
            (g, g1, g2)
        }
    }

    fn slope_y(&self, y: f64) -> f64 {
        if y < 0.0 {
            1.0 / (1.0 - self.params.lambda)
        } else {
            1.0 - self.params.mu
        }
    }
}

impl SmoothField for UpperBoundField {
    fn value(&self, x: f64, y: f64) -> f64 {
        let l = self.params.liquidation_value(x, y);
        self.outer()(l).0
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let l = self.params.liquidation_value(x, y);
        let (_, g1, _) = self.outer()(l);
        (g1, g1 * self.slope_y(y))
    }

    fn second_y(&self, x: f64, y: f64) -> f64 {
        let l = self.params.liquidation_value(x, y);
        let (_, _, g2) = self.outer()(l);
        let s = self.slope_y(y);
        g2 * s * s
    }
}

/// The frictionless bound `psi_k` as a smooth field in `z = x + k y`.
#[derive(Debug, Clone, Copy)]
pub struct PsiKField {
    pub params: MarketParams,
    pub constants: ClosedFormConstants,
    pub k: f64,
}

impl PsiKField {
    fn outer(&self, z: f64) -> (f64, f64, f64) {
        let p = &self.params;
        let d = self.constants.d;
        let scale = p.c - p.r * p.b;
        let base = ((p.c - p.r * z) / scale).max(0.0);
        (
            base.powf(d),
            -d * p.r / scale * base.powf(d - 1.0),
            d * (d - 1.0) * (p.r / scale) * (p.r / scale) * base.powf(d - 2.0),
        )
    }
}

impl SmoothField for PsiKField {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.outer(x + self.k * y).0
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let (_, g1, _) = self.outer(x + self.k * y);
        (g1, self.k * g1)
    }

    fn second_y(&self, x: f64, y: f64) -> f64 {
        let (_, _, g2) = self.outer(x + self.k * y);
        self.k * self.k * g2
    }
}

impl SmoothField for LyapunovSpec {
    fn value(&self, x: f64, y: f64) -> f64 {
        LyapunovSpec::value(self, x, y)
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let h1 = -self.h_base(x, y).powf(self.p - 1.0);
        (h1, self.k * h1)
    }

    fn second_y(&self, x: f64, y: f64) -> f64 {
        let h2 = (1.0 - self.p) * self.h_base(x, y).powf(self.p - 2.0);
        self.k * self.k * h2
    }
}

/// Lattice of `n` by `n` points strictly inside the wedge, truncated to
/// `y` in `[y_min, y_max]`. Shared by the Lyapunov negativity scan and the
/// verification battery.
pub fn sample_wedge_interior(
    p: &MarketParams,
    y_min: f64,
    y_max: f64,
    n: usize,
) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(n * n);
    for j in 0..n {
        // Offset by half a step so no sample sits on a boundary.
        let ty = (j as f64 + 0.5) / n as f64;
        let y = y_min + ty * (y_max - y_min);
        let (x_lo, x_hi) = wedge_x_range(p, y);
        for i in 0..n {
            let tx = (i as f64 + 0.5) / n as f64;
            points.push((x_lo + tx * (x_hi - x_lo), y));
        }
    }
    points
}

/// The x-interval for which `L(x, y)` lies in `(b, c/r)` at a given `y`.
pub fn wedge_x_range(p: &MarketParams, y: f64) -> (f64, f64) {
    let offset = -(1.0 - p.mu) * y.max(0.0) + (-y).max(0.0) / (1.0 - p.lambda);
    (p.b + offset, p.safe_level() + offset)
}
