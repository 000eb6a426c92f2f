//! Three-factor model definition, local-volatility grids and the extended
//! local-volatility formulas with stochastic domestic and foreign rates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{bracket, check_increasing, cholesky_psd};
use crate::rates::HullWhite;
use crate::surfaces::{dupire_local_vol_implied, CallPriceSurface, ImpliedVolSurface};

/// Pairwise correlations between the spot (`s`), domestic (`d`) and
/// foreign (`f`) Brownian drivers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Correlation3 {
    pub s_d: f64,
    pub s_f: f64,
    pub d_f: f64,
}

impl Correlation3 {
    pub fn matrix(&self) -> [f64; 9] {
        [1.0, self.s_d, self.s_f, self.s_d, 1.0, self.d_f, self.s_f, self.d_f, 1.0]
    }

    /// Lower Cholesky factor, row-major.
    pub fn cholesky(&self) -> Result<[f64; 9]> {
        for (name, r) in [("s_d", self.s_d), ("s_f", self.s_f), ("d_f", self.d_f)] {
            if !(-1.0..=1.0).contains(&r) {
                return Err(invalid(format!("correlation {name} = {r} outside [-1, 1]")));
            }
        }
        let l = cholesky_psd(&self.matrix(), 3)?;
        let mut out = [0.0; 9];
        out.copy_from_slice(&l);
        Ok(out)
    }
}

/// How a local-vol grid is read between time nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeInterp {
    /// Linear between nodes.
    #[default]
    Linear,
    /// Column `j` applies on `[t_j, t_{j+1})`.
    PiecewiseConstant,
}

/// Local volatility `sigma(t, S)` on a time x spot grid, linear in spot,
/// linear or piecewise-constant in time, flat outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalVolGrid {
    time_nodes: Vec<f64>,
    spot_nodes: Vec<f64>,
    /// Row-major `[time][spot]`.
    values: Vec<f64>,
    #[serde(default)]
    time_interp: TimeInterp,
}

impl LocalVolGrid {
    pub fn new(time_nodes: Vec<f64>, spot_nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_increasing("local vol time nodes", &time_nodes)?;
        check_increasing("local vol spot nodes", &spot_nodes)?;
        if time_nodes[0] < 0.0 || spot_nodes[0] <= 0.0 {
            return Err(invalid("local vol grid nodes must be non-negative times and positive spots"));
        }
        if values.len() != time_nodes.len() * spot_nodes.len() {
            return Err(invalid("local vol values do not match the grid shape"));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("local vol values must be finite and non-negative"));
        }
        Ok(Self {
            time_nodes,
            spot_nodes,
            values,
            time_interp: TimeInterp::Linear,
        })
    }

    pub fn with_time_interp(mut self, mode: TimeInterp) -> Self {
        self.time_interp = mode;
        self
    }

    pub fn time_interp(&self) -> TimeInterp {
        self.time_interp
    }

    /// Constant local vol.
    pub fn flat(sigma: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![1.0], vec![sigma])
    }

    /// Samples `f(t, S)` on the given nodes.
    pub fn from_fn(time_nodes: Vec<f64>, spot_nodes: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(time_nodes.len() * spot_nodes.len());
        for &t in &time_nodes {
            for &s in &spot_nodes {
                values.push(f(t, s));
            }
        }
        Self::new(time_nodes, spot_nodes, values)
    }

    pub fn time_nodes(&self) -> &[f64] {
        &self.time_nodes
    }

    pub fn spot_nodes(&self) -> &[f64] {
        &self.spot_nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.spot_nodes.len();
        &self.values[i * n..(i + 1) * n]
    }

    /// Grid restricted to the first `n_times` time nodes.
    pub fn truncated(&self, n_times: usize) -> Self {
        let n = n_times.clamp(1, self.time_nodes.len());
        Self {
            time_nodes: self.time_nodes[..n].to_vec(),
            spot_nodes: self.spot_nodes.clone(),
            values: self.values[..n * self.spot_nodes.len()].to_vec(),
            time_interp: self.time_interp,
        }
    }

    /// Local vols across the spot nodes, interpolated linearly in time.
    pub fn time_slice(&self, t: f64) -> Vec<f64> {
        let nt = self.time_nodes.len();
        if nt == 1 || t <= self.time_nodes[0] {
            return self.row(0).to_vec();
        }
        if t >= self.time_nodes[nt - 1] {
            return self.row(nt - 1).to_vec();
        }
        let i = bracket(&self.time_nodes, t);
        if self.time_interp == TimeInterp::PiecewiseConstant {
            return self.row(i).to_vec();
        }
        let w = (t - self.time_nodes[i]) / (self.time_nodes[i + 1] - self.time_nodes[i]);
        self.row(i)
            .iter()
            .zip(self.row(i + 1))
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Interpolates a time slice in spot.
    #[inline]
    pub fn interp_spot(&self, slice: &[f64], spot: f64) -> f64 {
        crate::math::interp_linear_flat(&self.spot_nodes, slice, spot)
    }

    pub fn sigma(&self, t: f64, spot: f64) -> f64 {
        self.interp_spot(&self.time_slice(t), spot)
    }
}

/// Spot with stochastic domestic and foreign Hull-White rates and a local
/// volatility for the spot.
#[derive(Debug, Clone)]
pub struct ThreeFactorModel {
    pub spot: f64,
    pub domestic: HullWhite,
    pub foreign: HullWhite,
    pub corr: Correlation3,
    pub local_vol: LocalVolGrid,
}

impl ThreeFactorModel {
    pub fn new(
        spot: f64,
        domestic: HullWhite,
        foreign: HullWhite,
        corr: Correlation3,
        local_vol: LocalVolGrid,
    ) -> Result<Self> {
        if !(spot > 0.0) || !spot.is_finite() {
            return Err(invalid(format!("spot must be positive, got {spot}")));
        }
        corr.cholesky()?;
        Ok(Self {
            spot,
            domestic,
            foreign,
            corr,
            local_vol,
        })
    }

    pub fn with_local_vol(&self, local_vol: LocalVolGrid) -> Self {
        Self {
            local_vol,
            ..self.clone()
        }
    }

    /// Outright forward `S0 P_f(0,T) / P_d(0,T)`.
    pub fn forward(&self, t: f64) -> f64 {
        self.spot * (self.domestic.curve().neg_log_discount(t) - self.foreign.curve().neg_log_discount(t)).exp()
    }

    pub fn domestic_discount(&self, t: f64) -> f64 {
        (-self.domestic.curve().neg_log_discount(t)).exp()
    }

    pub fn rates_deterministic(&self) -> bool {
        let zero = |m: &HullWhite| m.params().sigma.values().iter().all(|s| *s == 0.0);
        zero(&self.domestic) && zero(&self.foreign)
    }
}

/// How an expectation term was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectationSource {
    Mc,
    Pde,
    Analytic,
}

/// `E^{Q_T}[(r_d(T) K - r_f(T) S(T)) 1{S(T) > K}]` at one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectationTerm {
    pub strike: f64,
    pub maturity: f64,
    pub value: f64,
    pub std_error: Option<f64>,
    pub source: ExpectationSource,
}

/// Expectation term when both rates equal their initial forwards.
pub fn deterministic_expectation(surface: &CallPriceSurface, strike: f64, t: f64) -> Result<ExpectationTerm> {
    let p = surface.partials(strike, t)?;
    let pd = surface.discount(t);
    let (fd, ff) = (
        surface.domestic().forward_unchecked(t),
        surface.foreign().forward_unchecked(t),
    );
    let q = -p.d_dk / pd;
    let value = fd * strike * q - ff * (p.value / pd + strike * q);
    Ok(ExpectationTerm {
        strike,
        maturity: t,
        value,
        std_error: None,
        source: ExpectationSource::Analytic,
    })
}

fn check_convexity(surface: &CallPriceSurface, strike: f64, t: f64, d2c: f64) -> Result<()> {
    if d2c < surface.convexity_floor() {
        return Err(Error::DegenerateConvexity {
            strike,
            maturity: t,
            d2c_dk2: d2c,
        });
    }
    Ok(())
}

/// Local variance with stochastic rates from call-price derivatives and an
/// injected expectation term.
pub fn extended_local_vol_prices(surface: &CallPriceSurface, term: &ExpectationTerm) -> Result<f64> {
    let (k, t) = (term.strike, term.maturity);
    let p = surface.partials(k, t)?;
    check_convexity(surface, k, t, p.d2_dk2)?;
    Ok((p.d_dt - surface.discount(t) * term.value) / (0.5 * k * k * p.d2_dk2))
}

/// Same quantity expressed through implied-volatility derivatives: the
/// deterministic-rate part uses the implied-vol form of Dupire's formula and
/// the stochastic-rate part enters through the deviation of the expectation
/// term from its deterministic value.
pub fn extended_local_vol_implied(
    iv: &ImpliedVolSurface,
    domestic: &crate::rates::YieldCurve,
    foreign: &crate::rates::YieldCurve,
    term: &ExpectationTerm,
) -> Result<f64> {
    let (k, t) = (term.strike, term.maturity);
    let surface = CallPriceSurface::from_implied(iv.clone(), domestic.clone(), foreign.clone());
    let p = surface.partials(k, t)?;
    check_convexity(&surface, k, t, p.d2_dk2)?;
    let dupire = dupire_local_vol_implied(iv, domestic, foreign, k, t)?;
    let det = deterministic_expectation(&surface, k, t)?;
    Ok(dupire - surface.discount(t) * (term.value - det.value) / (0.5 * k * k * p.d2_dk2))
}

/// Three-factor local variance from the one-factor one plus covariance
/// corrections between rates and spot payoffs.
pub fn covariance_correction(
    sigma1f_sq: f64,
    cov_inds: f64,
    cov_payoff: f64,
    d2c_dk2: f64,
    discount: f64,
    strike: f64,
    floor: f64,
) -> Result<f64> {
    if !(d2c_dk2 >= floor) {
        return Err(Error::DegenerateConvexity {
            strike,
            maturity: f64::NAN,
            d2c_dk2,
        });
    }
    Ok(sigma1f_sq + strike * discount * (cov_inds + cov_payoff / strike) / (0.5 * strike * strike * d2c_dk2))
}

/// Converts a local variance to a volatility; tiny negative values from
/// rounding are clamped, larger ones are reported as arbitrage.
pub fn variance_to_vol(variance: f64, strike: f64, maturity: f64) -> Result<f64> {
    if variance >= 0.0 {
        Ok(variance.sqrt())
    } else if variance >= -1e-10 {
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance {
            strike,
            maturity,
            variance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::YieldCurve;
    use crate::surfaces::dupire_local_vol_prices;

    fn smile_surface() -> (ImpliedVolSurface, YieldCurve, YieldCurve) {
        let strikes: Vec<f64> = (0..13).map(|i| 0.7 + 0.05 * i as f64).collect();
        let maturities = vec![0.5, 1.0, 2.0];
        let vols = maturities
            .iter()
            .map(|_| strikes.iter().map(|k: &f64| 0.12 + 0.25 * k.ln().powi(2)).collect())
            .collect();
        (
            ImpliedVolSurface::new(1.0, strikes, maturities, vols).unwrap(),
            YieldCurve::flat(0.03),
            YieldCurve::flat(0.01),
        )
    }

    #[test]
    fn deterministic_term_recovers_dupire() {
        let (iv, d, f) = smile_surface();
        let cs = CallPriceSurface::from_implied(iv, d, f);
        for &(k, t) in &[(0.9, 0.7), (1.0, 1.2), (1.1, 1.8)] {
            let term = deterministic_expectation(&cs, k, t).unwrap();
            let ext = extended_local_vol_prices(&cs, &term).unwrap();
            let dup = dupire_local_vol_prices(&cs, k, t).unwrap();
            assert!((ext - dup).abs() < 1e-12 * dup.max(1.0));
        }
    }

    #[test]
    fn implied_form_matches_price_form() {
        let (iv, d, f) = smile_surface();
        let cs = CallPriceSurface::from_implied(iv.clone(), d.clone(), f.clone());
        for &(k, t, e) in &[(0.95, 0.8, 0.01), (1.0, 1.5, -0.002), (1.12, 1.1, 0.004)] {
            let term = ExpectationTerm {
                strike: k,
                maturity: t,
                value: e,
                std_error: None,
                source: ExpectationSource::Mc,
            };
            let a = extended_local_vol_prices(&cs, &term).unwrap();
            let b = extended_local_vol_implied(&iv, &d, &f, &term).unwrap();
            assert!((a - b).abs() < 1e-5 * a.abs().max(1e-2), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_term_zero_rates_flat_smile() {
        let iv = ImpliedVolSurface::flat(1.0, 0.2).unwrap();
        let zero = YieldCurve::flat(0.0);
        let term = ExpectationTerm {
            strike: 1.1,
            maturity: 1.0,
            value: 0.0,
            std_error: None,
            source: ExpectationSource::Analytic,
        };
        let v = extended_local_vol_implied(&iv, &zero, &zero, &term).unwrap();
        assert!((v - 0.04).abs() < 1e-10);
    }

    #[test]
    fn covariance_correction_vanishes_without_covariance() {
        assert_eq!(covariance_correction(0.04, 0.0, 0.0, 1.5, 0.97, 1.0, 1e-12).unwrap(), 0.04);
        assert!(covariance_correction(0.04, 0.1, 0.0, 0.0, 0.97, 1.0, 1e-12).is_err());
    }

    #[test]
    fn variance_conversion() {
        assert_eq!(variance_to_vol(0.04, 1.0, 1.0).unwrap(), 0.2);
        assert_eq!(variance_to_vol(-5e-11, 1.0, 1.0).unwrap(), 0.0);
        assert!(matches!(
            variance_to_vol(-1e-6, 1.0, 1.0),
            Err(Error::NegativeVariance { .. })
        ));
    }

    #[test]
    fn grid_interpolation_and_truncation() {
        let g = LocalVolGrid::from_fn(vec![0.0, 1.0, 2.0], vec![0.8, 1.0, 1.2], |t, s| 0.1 + 0.05 * t + 0.1 * s).unwrap();
        assert!((g.sigma(0.5, 0.9) - (0.1 + 0.025 + 0.09)).abs() < 1e-14);
        assert!((g.sigma(5.0, 2.0) - (0.1 + 0.1 + 0.12)).abs() < 1e-14);
        let t = g.truncated(2);
        assert!((t.sigma(5.0, 1.0) - 0.25).abs() < 1e-14);
        let pc = g.clone().with_time_interp(TimeInterp::PiecewiseConstant);
        assert!((pc.sigma(1.99, 1.0) - 0.25).abs() < 1e-14);
        assert!((pc.sigma(2.0, 1.0) - 0.3).abs() < 1e-14);
        assert!(LocalVolGrid::new(vec![0.0], vec![1.0], vec![-0.1]).is_err());
    }

    #[test]
    fn correlation_validation() {
        let ok = Correlation3 { s_d: 1.0, s_f: 1.0, d_f: 1.0 };
        assert!(ok.cholesky().is_ok());
        let bad = Correlation3 { s_d: 0.9, s_f: 0.9, d_f: -0.9 };
        assert!(bad.cholesky().is_err());
    }
}
