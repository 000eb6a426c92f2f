//! Yield curves and the Hull-White one-factor short-rate model.
//!
//! The short rate is written as `r(t) = x(t) + phi(t)` where `x` is a
//! zero-mean Ornstein-Uhlenbeck process started at zero and `phi` is the
//! deterministic shift that reproduces the initial discount curve.

use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_finite, invalid, Result};
use crate::math::{bracket, check_increasing};

/// Which side of the currency pair a curve or model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Currency {
    Domestic,
    Foreign,
}

/// Continuously-compounded zero curve, linear in the zero rate between
/// pillars and flat outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldCurve {
    pillar_times: Vec<f64>,
    zero_rates: Vec<f64>,
}

impl YieldCurve {
    pub fn new(pillar_times: Vec<f64>, zero_rates: Vec<f64>) -> Result<Self> {
        check_increasing("curve pillars", &pillar_times)?;
        if pillar_times.len() != zero_rates.len() {
            return Err(invalid("curve pillars and rates differ in length"));
        }
        if pillar_times[0] < 0.0 {
            return Err(invalid("curve pillars must be non-negative"));
        }
        for r in &zero_rates {
            ensure_finite("zero rate", *r)?;
        }
        Ok(Self {
            pillar_times,
            zero_rates,
        })
    }

    pub fn flat(rate: f64) -> Self {
        Self {
            pillar_times: vec![1.0],
            zero_rates: vec![rate],
        }
    }

    pub fn pillar_times(&self) -> &[f64] {
        &self.pillar_times
    }

    pub fn zero_rates(&self) -> &[f64] {
        &self.zero_rates
    }

    /// Interpolated zero rate; no domain check.
    pub fn zero_rate(&self, t: f64) -> f64 {
        let n = self.pillar_times.len();
        if n == 1 || t <= self.pillar_times[0] {
            return self.zero_rates[0];
        }
        if t >= self.pillar_times[n - 1] {
            return self.zero_rates[n - 1];
        }
        let i = bracket(&self.pillar_times, t);
        let (t0, t1) = (self.pillar_times[i], self.pillar_times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        self.zero_rates[i] + w * (self.zero_rates[i + 1] - self.zero_rates[i])
    }

    /// `-ln P(0, t)`.
    #[inline]
    pub fn neg_log_discount(&self, t: f64) -> f64 {
        self.zero_rate(t) * t
    }

    pub fn discount_factor(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok((-self.neg_log_discount(t)).exp())
    }

    /// Instantaneous forward `f(0, t) = -d ln P(0, t) / dt` by finite
    /// differences of the log-discount curve.
    pub fn instantaneous_forward(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.forward_unchecked(t))
    }

    pub(crate) fn forward_unchecked(&self, t: f64) -> f64 {
        let y = |s: f64| self.neg_log_discount(s);
        if t < 1e-8 {
            let h = 1e-4;
            return (-3.0 * y(t) + 4.0 * y(t + h) - y(t + 2.0 * h)) / (2.0 * h);
        }
        let h = (1e-4f64).min(0.5 * t);
        (y(t + h) - y(t - h)) / (2.0 * h)
    }

    /// Time derivative of the instantaneous forward.
    pub(crate) fn forward_slope(&self, t: f64) -> f64 {
        let y = |s: f64| self.neg_log_discount(s);
        if t < 2e-3 {
            let h = 1e-3;
            let t0 = t.max(0.0);
            return (2.0 * y(t0) - 5.0 * y(t0 + h) + 4.0 * y(t0 + 2.0 * h) - y(t0 + 3.0 * h)) / (h * h);
        }
        let h = 1e-3;
        (y(t + h) - 2.0 * y(t) + y(t - h)) / (h * h)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(domain(format!("time must be finite and non-negative, got {t}")));
    }
    Ok(())
}

/// Right-continuous piecewise-constant function of time: `values[i]` applies
/// on `[breaks[i], breaks[i + 1])`, the last value applies forever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_increasing("piecewise breaks", &breaks)?;
        if breaks.len() != values.len() {
            return Err(invalid("piecewise breaks and values differ in length"));
        }
        if breaks[0] != 0.0 {
            return Err(invalid("first piecewise break must be at t = 0"));
        }
        for v in &values {
            ensure_finite("piecewise value", *v)?;
        }
        Ok(Self { breaks, values })
    }

    pub fn constant(v: f64) -> Self {
        Self {
            breaks: vec![0.0],
            values: vec![v],
        }
    }

    /// Parses `"t:value"` pairs separated by commas, e.g. `"0:0.01,5:0.012"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut breaks = Vec::new();
        let mut values = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (t, v) = item
                .split_once(':')
                .ok_or_else(|| invalid(format!("expected t:value, got '{item}'")))?;
            let t: f64 = t.trim().parse().map_err(|_| invalid(format!("bad time in '{item}'")))?;
            let v: f64 = v.trim().parse().map_err(|_| invalid(format!("bad value in '{item}'")))?;
            breaks.push(t);
            values.push(v);
        }
        Self::new(breaks, values)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: f64) -> f64 {
        let idx = self.breaks.partition_point(|&b| b <= t);
        self.values[idx.saturating_sub(1)]
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|v| *v == self.values[0])
    }

    /// `sum_j v_j^2 * integral over [a_j, b_j] intersected with [0, t]
    /// of exp(-c (t - u)) du`.
    fn exp_weighted_square_integral(&self, c: f64, t: f64) -> f64 {
        let mut total = 0.0;
        for (j, &a) in self.breaks.iter().enumerate() {
            if a >= t {
                break;
            }
            let b = self.breaks.get(j + 1).copied().unwrap_or(f64::INFINITY).min(t);
            let v2 = self.values[j] * self.values[j];
            if v2 == 0.0 {
                continue;
            }
            let piece = if c == 0.0 {
                b - a
            } else {
                (-c * (t - b)).exp() * (-(-c * (b - a)).exp_m1()) / c
            };
            total += v2 * piece;
        }
        total
    }
}

/// Hull-White parameters for one currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullWhiteParams {
    pub alpha: f64,
    pub sigma: PiecewiseConstant,
    pub currency: Currency,
    /// Initial short rate; must agree with the curve's `f(0, 0)`.
    pub r0: f64,
}

/// `B(t, T) = (1 - exp(-alpha (T - t))) / alpha`, with the `alpha -> 0`
/// limit `T - t`.
pub fn b_factor(alpha: f64, t: f64, maturity: f64) -> Result<f64> {
    if t > maturity {
        return Err(domain(format!("b_factor requires t <= T, got t={t}, T={maturity}")));
    }
    Ok(b_unchecked(alpha, maturity - t))
}

#[inline]
pub(crate) fn b_unchecked(alpha: f64, tau: f64) -> f64 {
    if alpha.abs() < 1e-12 {
        tau
    } else {
        -(-alpha * tau).exp_m1() / alpha
    }
}

/// A Hull-White model fitted to an initial curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullWhite {
    params: HullWhiteParams,
    curve: YieldCurve,
}

impl HullWhite {
    pub fn new(params: HullWhiteParams, curve: YieldCurve) -> Result<Self> {
        if !(params.alpha > 0.0) || !params.alpha.is_finite() {
            return Err(invalid(format!("alpha must be positive, got {}", params.alpha)));
        }
        if params.sigma.values().iter().any(|s| *s < 0.0) {
            return Err(invalid("Hull-White sigma must be non-negative"));
        }
        ensure_finite("r0", params.r0)?;
        let f0 = curve.forward_unchecked(0.0);
        if (params.r0 - f0).abs() > 1e-6 {
            return Err(invalid(format!(
                "r0 = {} is inconsistent with the curve's instantaneous forward f(0,0) = {f0}",
                params.r0
            )));
        }
        Ok(Self { params, curve })
    }

    /// Model with `r0` set to the curve's `f(0, 0)`.
    pub fn fitted(alpha: f64, sigma: PiecewiseConstant, currency: Currency, curve: YieldCurve) -> Result<Self> {
        let r0 = curve.forward_unchecked(0.0);
        Self::new(HullWhiteParams { alpha, sigma, currency, r0 }, curve)
    }

    pub fn params(&self) -> &HullWhiteParams {
        &self.params
    }

    pub fn curve(&self) -> &YieldCurve {
        &self.curve
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.params.sigma.value(t)
    }

    pub fn b(&self, t: f64, maturity: f64) -> f64 {
        b_unchecked(self.params.alpha, maturity - t)
    }

    fn integral(&self, c: f64, t: f64) -> f64 {
        self.params.sigma.exp_weighted_square_integral(c, t)
    }

    /// Variance of the OU factor `x(t)`.
    pub fn var_x(&self, t: f64) -> f64 {
        self.integral(2.0 * self.params.alpha, t)
    }

    /// Convexity part of the shift: `phi(t) = f(0, t) + g(t)`.
    pub fn shift_convexity(&self, t: f64) -> f64 {
        let a = self.params.alpha;
        (self.integral(a, t) - self.integral(2.0 * a, t)) / a
    }

    /// Variance of `integral_0^T x(u) du`.
    pub fn integrated_variance(&self, t: f64) -> f64 {
        let a = self.params.alpha;
        let v = (self.integral(0.0, t) - 2.0 * self.integral(a, t) + self.integral(2.0 * a, t)) / (a * a);
        v.max(0.0)
    }

    /// Deterministic shift `phi(t)`.
    pub fn phi(&self, t: f64) -> f64 {
        self.curve.forward_unchecked(t) + self.shift_convexity(t)
    }

    /// `integral_{t1}^{t2} phi(u) du`.
    pub fn integrated_phi(&self, t1: f64, t2: f64) -> f64 {
        let y = |s: f64| self.curve.neg_log_discount(s) + 0.5 * self.integrated_variance(s);
        y(t2) - y(t1)
    }

    /// Zero-coupon bond price `P(t, T)` given the short rate `r` at `t`.
    pub fn zero_coupon_bond(&self, t: f64, maturity: f64, r: f64) -> Result<f64> {
        check_time(t)?;
        if maturity < t {
            return Err(domain(format!("bond maturity {maturity} precedes t = {t}")));
        }
        let b = self.b(t, maturity);
        let x = r - self.phi(t);
        let ln_ratio = self.curve.neg_log_discount(t) - self.curve.neg_log_discount(maturity);
        Ok((ln_ratio - b * x - b * self.shift_convexity(t) - 0.5 * b * b * self.var_x(t)).exp())
    }

    /// Bond volatility `sigma(t) B(t, T)` entering the T-forward measure drift.
    pub fn bond_volatility(&self, t: f64, maturity: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma(t) * b_factor(self.params.alpha, t, maturity)?)
    }

    /// Drift function `theta` of the classical form
    /// `dr = (theta(t) - alpha r) dt + sigma(t) dW`.
    pub fn fit_theta(&self) -> ThetaFunction {
        ThetaFunction { model: self.clone() }
    }
}

/// `theta(t) = df(0,t)/dt + alpha f(0,t) + Var x(t)`.
#[derive(Debug, Clone)]
pub struct ThetaFunction {
    model: HullWhite,
}

impl ThetaFunction {
    pub fn eval(&self, t: f64) -> f64 {
        let m = &self.model;
        m.curve.forward_slope(t) + m.alpha() * m.curve.forward_unchecked(t) + m.var_x(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(alpha: f64, sigma: f64, curve: YieldCurve) -> HullWhite {
        HullWhite::fitted(alpha, PiecewiseConstant::constant(sigma), Currency::Domestic, curve).unwrap()
    }

    #[test]
    fn discount_factor_examples() {
        let flat = YieldCurve::flat(0.03);
        assert!((flat.discount_factor(5.0).unwrap() - 0.860_707_976_425_057_8).abs() < 1e-7);
        let two = YieldCurve::new(vec![1.0, 2.0], vec![0.02, 0.04]).unwrap();
        assert!((two.discount_factor(1.5).unwrap() - (-0.045f64).exp()).abs() < 1e-15);
        assert!(flat.discount_factor(-0.1).is_err());
    }

    #[test]
    fn forward_of_linear_curve_is_exact() {
        let c = YieldCurve::new(vec![0.0, 10.0], vec![0.01, 0.03]).unwrap();
        for &t in &[0.0, 0.3, 2.0, 7.5] {
            let exact = 0.01 + 2.0 * 0.002 * t;
            assert!((c.instantaneous_forward(t).unwrap() - exact).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn b_factor_examples() {
        assert!((b_factor(0.05, 0.0, 10.0).unwrap() - 7.869_386_805_747_332).abs() < 1e-6);
        assert_eq!(b_factor(0.0, 1.0, 3.5).unwrap(), 2.5);
        assert!(b_factor(0.05, 2.0, 1.0).is_err());
        let m = model(0.05, 0.01, YieldCurve::flat(0.03));
        assert!((m.bond_volatility(0.0, 10.0).unwrap() - 0.078_693_868).abs() < 1e-7);
    }

    #[test]
    fn bond_reprices_curve_at_time_zero() {
        let c = YieldCurve::new(vec![0.5, 2.0, 10.0], vec![0.02, 0.025, 0.035]).unwrap();
        let m = model(0.05, 0.01, c.clone());
        let r0 = m.params().r0;
        for &t in &[0.25, 1.0, 5.0, 10.0, 20.0] {
            let p = m.zero_coupon_bond(0.0, t, r0).unwrap();
            assert!((p - c.discount_factor(t).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn inconsistent_r0_is_rejected() {
        let params = HullWhiteParams {
            alpha: 0.05,
            sigma: PiecewiseConstant::constant(0.01),
            currency: Currency::Domestic,
            r0: 0.05,
        };
        assert!(HullWhite::new(params, YieldCurve::flat(0.03)).is_err());
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        let sigma = PiecewiseConstant::new(vec![0.0, 1.5, 4.0], vec![0.008, 0.012, 0.006]).unwrap();
        let m = HullWhite::fitted(0.07, sigma, Currency::Foreign, YieldCurve::flat(0.01)).unwrap();
        let t_end = 6.0;
        let n = 60_000;
        let h = t_end / n as f64;
        let (mut var, mut g, mut v) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let u = (i as f64 + 0.5) * h;
            let s2 = m.sigma(u).powi(2);
            let e = (-0.07 * (t_end - u)).exp();
            var += s2 * e * e * h;
            g += s2 * e * m.b(u, t_end) * h;
            v += s2 * m.b(u, t_end).powi(2) * h;
        }
        assert!((m.var_x(t_end) - var).abs() < 1e-9);
        assert!((m.shift_convexity(t_end) - g).abs() < 1e-9);
        assert!((m.integrated_variance(t_end) - v).abs() < 1e-8);
    }

    #[test]
    fn integrated_phi_is_consistent_with_phi() {
        let c = YieldCurve::new(vec![0.0, 10.0], vec![0.01, 0.03]).unwrap();
        let m = model(0.1, 0.012, c);
        let (a, b) = (1.0, 3.0);
        let n = 2000;
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            let t = a + (i as f64 + 0.5) * h;
            s += m.phi(t) * h;
        }
        assert!((m.integrated_phi(a, b) - s).abs() < 1e-8);
    }

    #[test]
    fn theta_of_flat_deterministic_curve() {
        let m = model(0.05, 0.0, YieldCurve::flat(0.03));
        let theta = m.fit_theta();
        for &t in &[0.0, 1.0, 4.0] {
            assert!((theta.eval(t) - 0.05 * 0.03).abs() < 1e-10);
        }
    }

    #[test]
    fn theta_reproduces_curve_through_the_drift_ode() {
        let c = YieldCurve::new(vec![0.0, 10.0], vec![0.02, 0.04]).unwrap();
        let m = model(0.08, 0.01, c.clone());
        let theta = m.fit_theta();
        let t_end = 5.0;
        let n = 5000;
        let h = t_end / n as f64;
        let rhs = |t: f64, phi: f64| theta.eval(t) - 0.08 * phi;
        let mut phi = m.params().r0;
        let mut integral = 0.0;
        let mut t = 0.0;
        for _ in 0..n {
            let k1 = rhs(t, phi);
            let k2 = rhs(t + 0.5 * h, phi + 0.5 * h * k1);
            let k3 = rhs(t + 0.5 * h, phi + 0.5 * h * k2);
            let k4 = rhs(t + h, phi + h * k3);
            let next = phi + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
            integral += 0.5 * h * (phi + next);
            phi = next;
            t += h;
        }
        let p = (-integral + 0.5 * m.integrated_variance(t_end)).exp();
        assert!((p - c.discount_factor(t_end).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn piecewise_parsing() {
        let p = PiecewiseConstant::parse("0:0.01, 5:0.012").unwrap();
        assert_eq!(p.value(4.99), 0.01);
        assert_eq!(p.value(5.0), 0.012);
        assert!(PiecewiseConstant::parse("1:0.01").is_err());
        assert!(PiecewiseConstant::parse("0-0.01").is_err());
    }
}
