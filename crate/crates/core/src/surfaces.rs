//! Market surfaces: Garman-Kohlhagen pricing, implied-volatility and
//! call-price surfaces, and the one-factor Dupire local volatility.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::math::{check_increasing, norm_cdf, norm_pdf, NaturalCubicSpline};
use crate::rates::YieldCurve;

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain(format!("{name} must be positive and finite, got {x}")));
    }
    Ok(())
}

/// `(d+, d-)` of the Garman-Kohlhagen formula.
pub fn d_plus_minus(spot: f64, strike: f64, r_d: f64, r_f: f64, sigma: f64, t: f64) -> Result<(f64, f64)> {
    check_positive("spot", spot)?;
    check_positive("strike", strike)?;
    check_positive("sigma", sigma)?;
    check_positive("maturity", t)?;
    let s = sigma * t.sqrt();
    let dp = ((spot / strike).ln() + (r_d - r_f + 0.5 * sigma * sigma) * t) / s;
    Ok((dp, dp - s))
}

/// Garman-Kohlhagen price of a European FX call with flat rates.
pub fn black_scholes_call(spot: f64, strike: f64, r_d: f64, r_f: f64, sigma: f64, t: f64) -> Result<f64> {
    let (dp, dm) = d_plus_minus(spot, strike, r_d, r_f, sigma, t)?;
    Ok(spot * (-r_f * t).exp() * norm_cdf(dp) - strike * (-r_d * t).exp() * norm_cdf(dm))
}

/// Undiscounted Black call on a forward with total standard deviation `s`.
#[inline]
pub(crate) fn black_forward(forward: f64, strike: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return (forward - strike).max(0.0);
    }
    let d1 = ((forward / strike).ln() + 0.5 * s * s) / s;
    forward * norm_cdf(d1) - strike * norm_cdf(d1 - s)
}

/// Implied volatility of a call price under flat rates.
pub fn implied_vol(price: f64, spot: f64, strike: f64, r_d: f64, r_f: f64, t: f64) -> Result<f64> {
    check_positive("spot", spot)?;
    check_positive("strike", strike)?;
    check_positive("maturity", t)?;
    let df_f = (-r_f * t).exp();
    let df_d = (-r_d * t).exp();
    let lower = (spot * df_f - strike * df_d).max(0.0);
    let upper = spot * df_f;
    let tol = 1e-14 * spot.max(strike);
    if !price.is_finite() || price < lower - tol || price >= upper {
        return Err(domain(format!(
            "call price {price} outside no-arbitrage bounds [{lower}, {upper})"
        )));
    }
    if price <= lower + tol {
        return Ok(0.0);
    }
    let forward = spot * df_f / df_d;
    let target = price / df_d;
    let f = |sig: f64| black_forward(forward, strike, sig * t.sqrt()) - target;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Numeric("implied vol bracket failed".into()));
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = f(x);
        if fx.abs() < 1e-15 * target.max(1e-300) {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let s = x * t.sqrt();
        let d1 = ((forward / strike).ln() + 0.5 * s * s) / s;
        let vega = forward * norm_pdf(d1) * t.sqrt();
        let newton = x - fx / vega;
        x = if vega > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    Ok(x)
}

/// A surface value with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePartials {
    pub value: f64,
    pub d_dt: f64,
    pub d_dk: f64,
    pub d2_dk2: f64,
}

fn time_bump(t: f64) -> f64 {
    (1e-4f64).min(0.5 * t)
}

/// Implied-volatility surface on a strike x maturity grid: natural cubic
/// spline in strike, linear in total variance across maturities, flat
/// extrapolation in both directions.
#[derive(Debug, Clone)]
pub struct ImpliedVolSurface {
    spot: f64,
    strikes: Vec<f64>,
    maturities: Vec<f64>,
    vols: Vec<Vec<f64>>,
    splines: Vec<NaturalCubicSpline>,
}

impl ImpliedVolSurface {
    /// `vols[i][j]` is the implied vol at `maturities[i]`, `strikes[j]`.
    pub fn new(spot: f64, strikes: Vec<f64>, maturities: Vec<f64>, vols: Vec<Vec<f64>>) -> Result<Self> {
        check_positive("spot", spot).map_err(|e| invalid(e.to_string()))?;
        check_increasing("surface strikes", &strikes)?;
        check_increasing("surface maturities", &maturities)?;
        if strikes[0] <= 0.0 || maturities[0] <= 0.0 {
            return Err(invalid("surface strikes and maturities must be positive"));
        }
        if vols.len() != maturities.len() || vols.iter().any(|row| row.len() != strikes.len()) {
            return Err(invalid("implied vol grid does not match strikes x maturities"));
        }
        for row in &vols {
            if row.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(invalid("implied vols must be positive and finite"));
            }
        }
        let splines = vols
            .iter()
            .map(|row| NaturalCubicSpline::new(strikes.clone(), row.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spot,
            strikes,
            maturities,
            vols,
            splines,
        })
    }

    /// Flat surface with a single vol on a small placeholder grid.
    pub fn flat(spot: f64, vol: f64) -> Result<Self> {
        let strikes = vec![0.5 * spot, spot, 2.0 * spot];
        Self::new(spot, strikes, vec![1.0], vec![vec![vol; 3]])
    }

    /// Builds the grid from long-format rows `(strike, maturity, vol)`.
    pub fn from_rows(spot: f64, rows: &[(f64, f64, f64)]) -> Result<Self> {
        let mut strikes: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut maturities: Vec<f64> = rows.iter().map(|r| r.1).collect();
        strikes.sort_by(f64::total_cmp);
        strikes.dedup();
        maturities.sort_by(f64::total_cmp);
        maturities.dedup();
        let mut vols = vec![vec![f64::NAN; strikes.len()]; maturities.len()];
        for &(k, t, v) in rows {
            let j = strikes.binary_search_by(|x| x.total_cmp(&k)).unwrap();
            let i = maturities.binary_search_by(|x| x.total_cmp(&t)).unwrap();
            if !vols[i][j].is_nan() {
                return Err(invalid(format!("duplicate surface quote at K={k}, T={t}")));
            }
            vols[i][j] = v;
        }
        if vols.iter().flatten().any(|v| v.is_nan()) {
            return Err(invalid("surface quotes do not form a complete strike x maturity grid"));
        }
        Self::new(spot, strikes, maturities, vols)
    }

    pub fn spot(&self) -> f64 {
        self.spot
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn quotes(&self) -> &[Vec<f64>] {
        &self.vols
    }

    /// Total variance and its first two strike derivatives.
    fn total_variance(&self, strike: f64, t: f64) -> (f64, f64, f64) {
        let node = |i: usize| {
            let (s, s1, s2) = self.splines[i].eval_all(strike);
            let ti = self.maturities[i];
            (s * s * ti, 2.0 * s * s1 * ti, 2.0 * (s1 * s1 + s * s2) * ti)
        };
        let n = self.maturities.len();
        let scale = |(w, w1, w2): (f64, f64, f64), c: f64| (w * c, w1 * c, w2 * c);
        if t <= self.maturities[0] {
            return scale(node(0), t / self.maturities[0]);
        }
        if t >= self.maturities[n - 1] {
            return scale(node(n - 1), t / self.maturities[n - 1]);
        }
        let i = crate::math::bracket(&self.maturities, t);
        let (t0, t1) = (self.maturities[i], self.maturities[i + 1]);
        let a = (t - t0) / (t1 - t0);
        let (w0, w0k, w0kk) = node(i);
        let (w1, w1k, w1kk) = node(i + 1);
        (
            w0 + a * (w1 - w0),
            w0k + a * (w1k - w0k),
            w0kk + a * (w1kk - w0kk),
        )
    }

    pub fn vol(&self, strike: f64, t: f64) -> Result<f64> {
        check_positive("strike", strike)?;
        check_positive("maturity", t)?;
        Ok((self.total_variance(strike, t).0 / t).sqrt())
    }

    /// `sigma(K, T)` with `dsigma/dT`, `dsigma/dK`, `d2sigma/dK2`.
    pub fn partials(&self, strike: f64, t: f64) -> Result<SurfacePartials> {
        check_positive("strike", strike)?;
        check_positive("maturity", t)?;
        let (w, wk, wkk) = self.total_variance(strike, t);
        let sigma = (w / t).sqrt();
        let sk = wk / (2.0 * sigma * t);
        let skk = (wkk / (2.0 * t) - sk * sk) / sigma;
        let h = time_bump(t);
        let sig = |s: f64| (self.total_variance(strike, s).0 / s).sqrt();
        let st = (sig(t + h) - sig(t - h)) / (2.0 * h);
        Ok(SurfacePartials {
            value: sigma,
            d_dt: st,
            d_dk: sk,
            d2_dk2: skk,
        })
    }
}

/// Spline interpolation of quoted call prices on a strike x maturity grid.
#[derive(Debug, Clone)]
pub struct QuotedPrices {
    strikes: Vec<f64>,
    maturities: Vec<f64>,
    splines: Vec<NaturalCubicSpline>,
}

#[derive(Debug, Clone)]
pub enum PriceSource {
    Implied(ImpliedVolSurface),
    Quotes(QuotedPrices),
}

/// Call prices `C(K, T)` and their partial derivatives, backed either by an
/// implied-vol surface or by a grid of quoted prices.
#[derive(Debug, Clone)]
pub struct CallPriceSurface {
    spot: f64,
    domestic: YieldCurve,
    foreign: YieldCurve,
    source: PriceSource,
}

impl CallPriceSurface {
    pub fn from_implied(iv: ImpliedVolSurface, domestic: YieldCurve, foreign: YieldCurve) -> Self {
        Self {
            spot: iv.spot(),
            domestic,
            foreign,
            source: PriceSource::Implied(iv),
        }
    }

    /// `prices[i][j]` is the call price at `maturities[i]`, `strikes[j]`.
    pub fn from_quotes(
        spot: f64,
        strikes: Vec<f64>,
        maturities: Vec<f64>,
        prices: Vec<Vec<f64>>,
        domestic: YieldCurve,
        foreign: YieldCurve,
    ) -> Result<Self> {
        check_positive("spot", spot).map_err(|e| invalid(e.to_string()))?;
        check_increasing("price strikes", &strikes)?;
        check_increasing("price maturities", &maturities)?;
        if strikes.len() < 3 {
            return Err(invalid("at least three strikes are needed per maturity"));
        }
        if prices.len() != maturities.len() || prices.iter().any(|r| r.len() != strikes.len()) {
            return Err(invalid("price grid does not match strikes x maturities"));
        }
        let tol = 1e-10 * spot;
        for (i, row) in prices.iter().enumerate() {
            for j in 1..row.len() {
                if row[j] > row[j - 1] + tol {
                    return Err(invalid(format!(
                        "call prices increase in strike at T={}, K={}",
                        maturities[i], strikes[j]
                    )));
                }
            }
            for j in 1..row.len() - 1 {
                let s0 = (row[j] - row[j - 1]) / (strikes[j] - strikes[j - 1]);
                let s1 = (row[j + 1] - row[j]) / (strikes[j + 1] - strikes[j]);
                if s1 < s0 - 1e-10 {
                    return Err(invalid(format!(
                        "call prices are not convex at T={}, K={}",
                        maturities[i], strikes[j]
                    )));
                }
            }
        }
        let splines = prices
            .into_iter()
            .map(|row| NaturalCubicSpline::new(strikes.clone(), row))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spot,
            domestic,
            foreign,
            source: PriceSource::Quotes(QuotedPrices {
                strikes,
                maturities,
                splines,
            }),
        })
    }

    pub fn spot(&self) -> f64 {
        self.spot
    }

    pub fn domestic(&self) -> &YieldCurve {
        &self.domestic
    }

    pub fn foreign(&self) -> &YieldCurve {
        &self.foreign
    }

    pub fn source(&self) -> &PriceSource {
        &self.source
    }

    pub fn implied(&self) -> Option<&ImpliedVolSurface> {
        match &self.source {
            PriceSource::Implied(iv) => Some(iv),
            PriceSource::Quotes(_) => None,
        }
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.domestic.neg_log_discount(t)).exp()
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.spot * (self.domestic.neg_log_discount(t) - self.foreign.neg_log_discount(t)).exp()
    }

    /// Floor below which `d2C/dK2` is treated as a degenerate density.
    pub fn convexity_floor(&self) -> f64 {
        1e-12 / (self.spot * self.spot)
    }

    fn check_query(&self, strike: f64, t: f64) -> Result<()> {
        check_positive("strike", strike)?;
        check_positive("maturity", t)?;
        if let PriceSource::Quotes(q) = &self.source {
            let (k0, k1) = (q.strikes[0], q.strikes[q.strikes.len() - 1]);
            let (t0, t1) = (q.maturities[0], q.maturities[q.maturities.len() - 1]);
            if strike < k0 || strike > k1 || t < t0 || t > t1 {
                return Err(domain(format!(
                    "(K={strike}, T={t}) outside quoted grid [{k0}, {k1}] x [{t0}, {t1}]"
                )));
            }
        }
        Ok(())
    }

    fn price_unchecked(&self, strike: f64, t: f64) -> f64 {
        match &self.source {
            PriceSource::Implied(iv) => {
                let w = iv.total_variance(strike, t).0;
                self.discount(t) * black_forward(self.forward(t), strike, w.sqrt())
            }
            PriceSource::Quotes(q) => quoted(q, strike, t).0,
        }
    }

    pub fn price(&self, strike: f64, t: f64) -> Result<f64> {
        self.check_query(strike, t)?;
        Ok(self.price_unchecked(strike, t))
    }

    /// `C(K, T)` with `dC/dT`, `dC/dK`, `d2C/dK2`.
    pub fn partials(&self, strike: f64, t: f64) -> Result<SurfacePartials> {
        self.check_query(strike, t)?;
        match &self.source {
            PriceSource::Implied(iv) => {
                let sp = iv.partials(strike, t)?;
                let d = self.discount(t);
                let f = self.forward(t);
                let sq = t.sqrt();
                let s = sp.value * sq;
                let d1 = ((f / strike).ln() + 0.5 * s * s) / s;
                let d2 = d1 - s;
                let n2 = norm_pdf(d2);
                let sk = sp.d_dk;
                let value = d * (f * norm_cdf(d1) - strike * norm_cdf(d2));
                let d_dk = d * (-norm_cdf(d2) + strike * n2 * sq * sk);
                let d2_dk2 = d
                    * n2
                    * (1.0 / (strike * s)
                        + 2.0 * d1 * sk / sp.value
                        + strike * d1 * d2 * sq * sk * sk / sp.value
                        + strike * sq * sp.d2_dk2);
                let h = time_bump(t);
                let d_dt = (self.price_unchecked(strike, t + h) - self.price_unchecked(strike, t - h)) / (2.0 * h);
                Ok(SurfacePartials {
                    value,
                    d_dt,
                    d_dk,
                    d2_dk2,
                })
            }
            PriceSource::Quotes(q) => {
                let (value, d_dk, d2_dk2) = quoted(q, strike, t);
                let n = q.maturities.len();
                let d_dt = if n == 1 {
                    0.0
                } else {
                    let h = time_bump(t);
                    let lo = (t - h).max(q.maturities[0]);
                    let hi = (t + h).min(q.maturities[n - 1]);
                    (quoted(q, strike, hi).0 - quoted(q, strike, lo).0) / (hi - lo)
                };
                Ok(SurfacePartials {
                    value,
                    d_dt,
                    d_dk,
                    d2_dk2,
                })
            }
        }
    }
}

fn quoted(q: &QuotedPrices, strike: f64, t: f64) -> (f64, f64, f64) {
    let n = q.maturities.len();
    if n == 1 || t <= q.maturities[0] {
        return q.splines[0].eval_all(strike);
    }
    if t >= q.maturities[n - 1] {
        return q.splines[n - 1].eval_all(strike);
    }
    let i = crate::math::bracket(&q.maturities, t);
    let a = (t - q.maturities[i]) / (q.maturities[i + 1] - q.maturities[i]);
    let x = q.splines[i].eval_all(strike);
    let y = q.splines[i + 1].eval_all(strike);
    (x.0 + a * (y.0 - x.0), x.1 + a * (y.1 - x.1), x.2 + a * (y.2 - x.2))
}

/// Dupire local variance from call-price derivatives with deterministic
/// rates given by the surface's instantaneous forwards at `T`.
///
/// The raw variance is returned; negative values signal butterfly or
/// calendar arbitrage and are left to [`crate::localvol::variance_to_vol`].
pub fn dupire_local_vol_prices(surface: &CallPriceSurface, strike: f64, t: f64) -> Result<f64> {
    let p = surface.partials(strike, t)?;
    let (rd, rf) = (
        surface.domestic().forward_unchecked(t),
        surface.foreign().forward_unchecked(t),
    );
    if p.d2_dk2 < surface.convexity_floor() {
        return Err(Error::DegenerateConvexity {
            strike,
            maturity: t,
            d2c_dk2: p.d2_dk2,
        });
    }
    let num = p.d_dt + (rd - rf) * strike * p.d_dk + rf * p.value;
    Ok(num / (0.5 * strike * strike * p.d2_dk2))
}

/// Dupire local variance expressed through implied-vol derivatives.
pub fn dupire_local_vol_implied(
    iv: &ImpliedVolSurface,
    domestic: &YieldCurve,
    foreign: &YieldCurve,
    strike: f64,
    t: f64,
) -> Result<f64> {
    let p = iv.partials(strike, t)?;
    let (rd, rf) = (domestic.forward_unchecked(t), foreign.forward_unchecked(t));
    let forward = iv.spot() * (domestic.neg_log_discount(t) - foreign.neg_log_discount(t)).exp();
    let (s, st, sk, skk) = (p.value, p.d_dt, p.d_dk, p.d2_dk2);
    let sq = t.sqrt();
    let d1 = ((forward / strike).ln() + 0.5 * s * s * t) / (s * sq);
    let num = s * s + 2.0 * t * s * st + 2.0 * (rd - rf) * strike * t * s * sk;
    let a = 1.0 + strike * d1 * sq * sk;
    let den = a * a + strike * strike * t * s * (skk - d1 * sq * sk * sk);
    if !(den > 0.0) {
        return Err(Error::DegenerateConvexity {
            strike,
            maturity: t,
            d2c_dk2: den,
        });
    }
    Ok(num / den)
}
