//! Monte Carlo simulation of spot and both short rates under the domestic
//! T-forward (or risk-neutral) measure, and the forward bootstrap
//! calibration of the local volatility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{evaluate_column, Calibration, CalibrationGrid, NodeInput};
use crate::error::{invalid, Result};
use crate::hybrid::GammaSpec;
use crate::localvol::{ExpectationSource, ExpectationTerm, LocalVolGrid, ThreeFactorModel, TimeInterp};
use crate::math::{cholesky_psd, mean_and_se};
use crate::surfaces::CallPriceSurface;

/// Discretisation of the spot equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    EulerLogSpot,
    EulerSpot,
}

/// Monte Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_paths: usize,
    pub steps_per_year: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_true")]
    pub antithetic: bool,
}

fn default_true() -> bool {
    true
}

impl SimSpec {
    pub fn new(n_paths: usize, steps_per_year: usize, seed: u64) -> Self {
        Self {
            n_paths,
            steps_per_year,
            seed,
            scheme: Scheme::EulerLogSpot,
            antithetic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(invalid("n_paths must be at least 2"));
        }
        if self.steps_per_year < 1 {
            return Err(invalid("steps_per_year must be at least 1"));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(invalid("antithetic sampling needs an even number of paths"));
        }
        Ok(())
    }

    fn per_unit(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }
}

/// State of one path at the simulation horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub spot: f64,
    pub r_d: f64,
    pub r_f: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

/// Simulated states at one horizon. Paths come in units of one (plain) or
/// two (antithetic pair); statistics are computed over unit averages.
/// Risk-neutral simulations carry weights `D(T) / P_d(0, T)` that turn
/// averages into T-forward expectations.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub horizon: f64,
    pub samples: Vec<StateSample>,
    pub paths_per_unit: usize,
    pub weights: Option<Vec<f64>>,
}

impl SampleSet {
    /// T-forward expectation of `f` and its standard error.
    pub fn estimate(&self, f: impl Fn(&StateSample) -> f64) -> (f64, f64) {
        let m = self.paths_per_unit;
        let ys: Vec<f64> = self
            .samples
            .chunks(m)
            .enumerate()
            .map(|(u, chunk)| {
                let mut acc = 0.0;
                for (i, s) in chunk.iter().enumerate() {
                    let w = self.weights.as_ref().map_or(1.0, |w| w[u * m + i]);
                    acc += w * f(s);
                }
                acc / chunk.len() as f64
            })
            .collect();
        mean_and_se(&ys)
    }

    /// Covariance of `f` and `g` with the standard error of the estimate.
    pub fn covariance(&self, f: impl Fn(&StateSample) -> f64, g: impl Fn(&StateSample) -> f64) -> (f64, f64) {
        let (mf, _) = self.estimate(&f);
        let (mg, _) = self.estimate(&g);
        self.estimate(|s| (f(s) - mf) * (g(s) - mg))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Measure under which paths are simulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Measure {
    TForward(f64),
    RiskNeutral,
}

/// Ornstein-Uhlenbeck volatility factor multiplying the local vol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct VolFactor {
    pub k: f64,
    pub lambda: f64,
    pub xi: f64,
    pub nu0: f64,
    pub gamma: GammaSpec,
}

/// Correlated dynamics of `(S, x_d, x_f[, nu])`.
#[derive(Debug, Clone)]
pub(crate) struct Dynamics {
    pub model: ThreeFactorModel,
    pub vol_factor: Option<VolFactor>,
    /// Row-major lower Cholesky factor, `dim x dim`.
    chol: Vec<f64>,
    dim: usize,
    rho: [f64; 6],
}

impl Dynamics {
    pub fn three_factor(model: &ThreeFactorModel) -> Result<Self> {
        let c = model.corr;
        let chol = cholesky_psd(&c.matrix(), 3)?;
        model.corr.cholesky()?;
        Ok(Self {
            model: model.clone(),
            vol_factor: None,
            chol,
            dim: 3,
            rho: [c.s_d, c.s_f, c.d_f, 0.0, 0.0, 0.0],
        })
    }

    /// Four-factor dynamics; `rho_nu = (s_nu, d_nu, f_nu)`.
    pub fn with_vol_factor(model: &ThreeFactorModel, factor: VolFactor, rho_nu: [f64; 3]) -> Result<Self> {
        let c = model.corr;
        let [sn, dn, fnu] = rho_nu;
        for r in rho_nu {
            if !(-1.0..=1.0).contains(&r) {
                return Err(invalid(format!("vol-factor correlation {r} outside [-1, 1]")));
            }
        }
        let m = [
            1.0, c.s_d, c.s_f, sn, //
            c.s_d, 1.0, c.d_f, dn, //
            c.s_f, c.d_f, 1.0, fnu, //
            sn, dn, fnu, 1.0,
        ];
        model.corr.cholesky()?;
        let chol = cholesky_psd(&m, 4)?;
        Ok(Self {
            model: model.clone(),
            vol_factor: Some(factor),
            chol,
            dim: 4,
            rho: [c.s_d, c.s_f, c.d_f, sn, dn, fnu],
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PathState {
    s: f64,
    x_d: f64,
    x_f: f64,
    nu: f64,
    int_rd: f64,
}

#[derive(Debug, Clone)]
struct Unit {
    rng: ChaCha8Rng,
    paths: [PathState; 2],
}

struct StepCoef {
    dt: f64,
    sqdt: f64,
    dphi_d: f64,
    dphi_f: f64,
    phi_diff: f64,
    b_d: f64,
    sig_d: f64,
    sig_f: f64,
    slice: usize,
}

/// Paths advanced together in time; each unit owns its random stream so
/// results do not depend on how work is split across threads.
pub(crate) struct PathBundle {
    units: Vec<Unit>,
    per_unit: usize,
    t: f64,
}

impl PathBundle {
    pub fn new(dynamics: &Dynamics, spec: &SimSpec) -> Result<Self> {
        spec.validate()?;
        let per_unit = spec.per_unit();
        let n_units = spec.n_paths / per_unit;
        let nu0 = dynamics.vol_factor.map_or(0.0, |v| v.nu0);
        let start = PathState {
            s: dynamics.model.spot,
            nu: nu0,
            ..Default::default()
        };
        let units = (0..n_units)
            .map(|u| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(u as u64);
                Unit {
                    rng,
                    paths: [start; 2],
                }
            })
            .collect();
        Ok(Self { units, per_unit, t: 0.0 })
    }

    /// Advances all paths to `t_end` with a uniform step of at most
    /// `1 / steps_per_year`.
    pub fn advance(
        &mut self,
        dynamics: &Dynamics,
        grid: &LocalVolGrid,
        measure: Measure,
        t_end: f64,
        spec: &SimSpec,
    ) -> Result<()> {
        if !(t_end > self.t) {
            return Err(invalid(format!("cannot advance paths from {} to {t_end}", self.t)));
        }
        let model = &dynamics.model;
        let (dom, fgn) = (&model.domestic, &model.foreign);
        let span = t_end - self.t;
        let n = ((span * spec.steps_per_year as f64) - 1e-9).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let mut slices: Vec<Vec<f64>> = Vec::new();
        let mut coefs = Vec::with_capacity(n);
        for i in 0..n {
            let t0 = self.t + i as f64 * h;
            let t1 = if i + 1 == n { t_end } else { t0 + h };
            let tm = 0.5 * (t0 + t1);
            let slice = grid.time_slice(t0);
            if slices.last() != Some(&slice) {
                slices.push(slice);
            }
            let b_d = match measure {
                Measure::TForward(horizon) => dom.b(tm, horizon),
                Measure::RiskNeutral => 0.0,
            };
            coefs.push(StepCoef {
                dt: t1 - t0,
                sqdt: (t1 - t0).sqrt(),
                dphi_d: dom.integrated_phi(t0, t1),
                dphi_f: fgn.integrated_phi(t0, t1),
                phi_diff: dom.phi(t0) - fgn.phi(t0),
                b_d,
                sig_d: dom.sigma(tm),
                sig_f: fgn.sigma(tm),
                slice: slices.len() - 1,
            });
        }
        let ctx = StepContext {
            dynamics,
            grid,
            slices: &slices,
            coefs: &coefs,
            scheme: spec.scheme,
            per_unit: self.per_unit,
        };
        self.units.par_iter_mut().for_each(|unit| ctx.run(unit));
        self.t = t_end;
        Ok(())
    }

    /// Snapshot of the current states.
    pub fn samples(&self, dynamics: &Dynamics, measure: Measure) -> SampleSet {
        let model = &dynamics.model;
        let t = self.t;
        let (phi_d, phi_f) = (model.domestic.phi(t), model.foreign.phi(t));
        let with_nu = dynamics.vol_factor.is_some();
        let mut samples = Vec::with_capacity(self.units.len() * self.per_unit);
        let mut weights = Vec::new();
        let pd = model.domestic_discount(t);
        for unit in &self.units {
            for p in &unit.paths[..self.per_unit] {
                samples.push(StateSample {
                    spot: p.s,
                    r_d: phi_d + p.x_d,
                    r_f: phi_f + p.x_f,
                    nu: with_nu.then_some(p.nu),
                });
                if measure == Measure::RiskNeutral {
                    weights.push((-p.int_rd).exp() / pd);
                }
            }
        }
        SampleSet {
            horizon: t,
            samples,
            paths_per_unit: self.per_unit,
            weights: (measure == Measure::RiskNeutral).then_some(weights),
        }
    }
}

struct StepContext<'a> {
    dynamics: &'a Dynamics,
    grid: &'a LocalVolGrid,
    slices: &'a [Vec<f64>],
    coefs: &'a [StepCoef],
    scheme: Scheme,
    per_unit: usize,
}

impl StepContext<'_> {
    fn run(&self, unit: &mut Unit) {
        let d = self.dynamics;
        let model = &d.model;
        let (a_d, a_f) = (model.domestic.alpha(), model.foreign.alpha());
        let [r_sd, r_sf, r_df, _, r_dn, _] = d.rho;
        let l = &d.chol;
        let dim = d.dim;
        let mut eps = [0.0f64; 4];
        let mut z = [0.0f64; 4];
        for c in self.coefs {
            for e in eps.iter_mut().take(dim) {
                *e = StandardNormal.sample(&mut unit.rng);
            }
            for i in 0..dim {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l[i * dim + j] * eps[j];
                }
                z[i] = acc;
            }
            let slice = &self.slices[c.slice];
            for (p, sign) in unit.paths[..self.per_unit].iter_mut().zip([1.0, -1.0]) {
                let lv = self.grid.interp_spot(slice, p.s);
                let vol = match &d.vol_factor {
                    Some(f) => lv * f.gamma.eval(p.nu),
                    None => lv,
                };
                let (x_d, x_f) = (p.x_d, p.x_f);
                match self.scheme {
                    Scheme::EulerLogSpot => {
                        let drift = c.dphi_d - c.dphi_f + (x_d - x_f) * c.dt
                            - r_sd * vol * c.sig_d * c.b_d * c.dt
                            - 0.5 * vol * vol * c.dt;
                        p.s *= (drift + vol * c.sqdt * sign * z[0]).exp();
                    }
                    Scheme::EulerSpot => {
                        let mu = c.phi_diff + x_d - x_f - r_sd * vol * c.sig_d * c.b_d;
                        p.s = (p.s * (1.0 + mu * c.dt + vol * c.sqdt * sign * z[0])).max(f64::MIN_POSITIVE);
                    }
                }
                p.x_d = x_d + (-a_d * x_d - c.sig_d * c.sig_d * c.b_d) * c.dt + c.sig_d * c.sqdt * sign * z[1];
                p.x_f = x_f
                    + (-a_f * x_f - r_sf * c.sig_f * vol - r_df * c.sig_d * c.b_d * c.sig_f) * c.dt
                    + c.sig_f * c.sqdt * sign * z[2];
                p.int_rd += c.dphi_d + 0.5 * (x_d + p.x_d) * c.dt;
                if let Some(f) = &d.vol_factor {
                    p.nu += (f.k * (f.lambda - p.nu) - r_dn * f.xi * c.sig_d * c.b_d) * c.dt
                        + f.xi * c.sqdt * sign * z[3];
                }
            }
        }
    }
}

/// Simulates `(S, r_d, r_f)` at `horizon` under the domestic T-forward
/// measure using the model's local volatility.
pub fn simulate_tforward(model: &ThreeFactorModel, horizon: f64, spec: &SimSpec) -> Result<SampleSet> {
    if !(horizon > 0.0) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    let dynamics = Dynamics::three_factor(model)?;
    let mut bundle = PathBundle::new(&dynamics, spec)?;
    let measure = Measure::TForward(horizon);
    bundle.advance(&dynamics, &model.local_vol, measure, horizon, spec)?;
    Ok(bundle.samples(&dynamics, measure))
}

/// `E^{Q_T}[(r_d K - r_f S) 1{S > K}]` with its standard error.
pub fn expectation_term_mc(samples: &SampleSet, strike: f64) -> ExpectationTerm {
    let (value, se) = samples.estimate(|s| {
        if s.spot > strike {
            s.r_d * strike - s.r_f * s.spot
        } else {
            0.0
        }
    });
    ExpectationTerm {
        strike,
        maturity: samples.horizon,
        value,
        std_error: Some(se),
        source: ExpectationSource::Mc,
    }
}

/// `Cov(r_f - r_d, 1{S > K})` and `Cov(r_f, (S - K)^+)` with the standard
/// error of `cov_inds + cov_payoff / K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceTerms {
    pub cov_inds: f64,
    pub cov_payoff: f64,
    pub std_error: f64,
}

pub fn covariance_terms_mc(samples: &SampleSet, strike: f64) -> CovarianceTerms {
    let ind = |s: &StateSample| if s.spot > strike { 1.0 } else { 0.0 };
    let spread = |s: &StateSample| s.r_f - s.r_d;
    let payoff = |s: &StateSample| (s.spot - strike).max(0.0);
    let rf = |s: &StateSample| s.r_f;
    let (m_ind, _) = samples.estimate(ind);
    let (m_spread, _) = samples.estimate(spread);
    let (m_pay, _) = samples.estimate(payoff);
    let (m_rf, _) = samples.estimate(rf);
    let (cov_inds, _) = samples.estimate(|s| (spread(s) - m_spread) * (ind(s) - m_ind));
    let (cov_payoff, _) = samples.estimate(|s| (rf(s) - m_rf) * (payoff(s) - m_pay));
    let (_, std_error) = samples.estimate(|s| {
        (spread(s) - m_spread) * (ind(s) - m_ind) + (rf(s) - m_rf) * (payoff(s) - m_pay) / strike
    });
    CovarianceTerms {
        cov_inds,
        cov_payoff,
        std_error,
    }
}

/// How paths are generated across calibration dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    /// New T_k-forward paths from time zero for every date.
    #[default]
    Resimulate,
    /// One risk-neutral path set extended date by date, reweighted by the
    /// stochastic discount factor.
    Reuse,
}

/// Options of the Monte Carlo bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCalibrationOptions {
    #[serde(default)]
    pub path_mode: PathMode,
    /// Minimum number of paths required on each side of a strike.
    #[serde(default = "default_min_tail")]
    pub min_tail_paths: usize,
    /// Minimum market density at a strike relative to the density at the
    /// forward.
    #[serde(default = "default_density_ratio")]
    pub min_density_ratio: f64,
}

fn default_min_tail() -> usize {
    100
}

fn default_density_ratio() -> f64 {
    1e-4
}

impl Default for McCalibrationOptions {
    fn default() -> Self {
        Self {
            path_mode: PathMode::Resimulate,
            min_tail_paths: default_min_tail(),
            min_density_ratio: default_density_ratio(),
        }
    }
}

pub(crate) fn market_support(surface: &CallPriceSurface, t: f64, strikes: &[f64], ratio: f64) -> Result<Vec<bool>> {
    let atm = surface.forward(t);
    let dens_atm = match surface.partials(atm, t) {
        Ok(p) => p.d2_dk2,
        Err(_) => strikes
            .iter()
            .filter_map(|&k| surface.partials(k, t).ok().map(|p| p.d2_dk2))
            .fold(0.0, f64::max),
    };
    strikes
        .iter()
        .map(|&k| Ok(surface.partials(k, t)?.d2_dk2 >= ratio * dens_atm))
        .collect()
}

/// Forward bootstrap of the local volatility: the first column is the
/// deterministic-rate Dupire vol, each later column uses paths simulated
/// with the columns already built.
pub fn calibrate_mc(
    surface: &CallPriceSurface,
    model: &ThreeFactorModel,
    grid: &CalibrationGrid,
    spec: &SimSpec,
    options: &McCalibrationOptions,
) -> Result<Calibration> {
    spec.validate()?;
    let strikes = &grid.strikes;
    let mut values: Vec<f64> = Vec::with_capacity(grid.times.len() * strikes.len());
    let mut diagnostics = Vec::new();
    let first = grid.times[0];
    let inputs: Vec<NodeInput> = market_support(surface, first, strikes, options.min_density_ratio)?
        .into_iter()
        .map(|supported| NodeInput { term: None, supported })
        .collect();
    let (col, diag) = evaluate_column(surface, first, strikes, &inputs)?;
    values.extend(col);
    diagnostics.extend(diag);

    let dynamics = Dynamics::three_factor(model)?;
    let mut reuse = match options.path_mode {
        PathMode::Reuse => Some(PathBundle::new(&dynamics, spec)?),
        PathMode::Resimulate => None,
    };
    for (k, &t) in grid.times.iter().enumerate().skip(1) {
        let partial = LocalVolGrid::new(grid.times[..k].to_vec(), strikes.clone(), values.clone())?
            .with_time_interp(TimeInterp::PiecewiseConstant);
        let samples = match reuse.as_mut() {
            Some(bundle) => {
                bundle.advance(&dynamics, &partial, Measure::RiskNeutral, t, spec)?;
                bundle.samples(&dynamics, Measure::RiskNeutral)
            }
            None => {
                let mut bundle = PathBundle::new(&dynamics, spec)?;
                bundle.advance(&dynamics, &partial, Measure::TForward(t), t, spec)?;
                bundle.samples(&dynamics, Measure::TForward(t))
            }
        };
        let support = market_support(surface, t, strikes, options.min_density_ratio)?;
        let mut sorted: Vec<f64> = samples.samples.iter().map(|s| s.spot).collect();
        sorted.sort_by(f64::total_cmp);
        let inputs: Vec<NodeInput> = strikes
            .par_iter()
            .zip(support.par_iter())
            .map(|(&kk, &dens_ok)| {
                let below = sorted.partition_point(|&s| s <= kk);
                let above = sorted.len() - below;
                NodeInput {
                    term: Some(expectation_term_mc(&samples, kk)),
                    supported: dens_ok && below >= options.min_tail_paths && above >= options.min_tail_paths,
                }
            })
            .collect();
        let (col, diag) = evaluate_column(surface, t, strikes, &inputs)?;
        values.extend(col);
        diagnostics.extend(diag);
    }
    let grid = LocalVolGrid::new(grid.times.clone(), strikes.clone(), values)?
        .with_time_interp(TimeInterp::PiecewiseConstant);
    Ok(Calibration { grid, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localvol::Correlation3;
    use crate::rates::{Currency, HullWhite, PiecewiseConstant, YieldCurve};

    fn model(sig_s: f64, sig_d: f64, sig_f: f64, corr: Correlation3) -> ThreeFactorModel {
        let d = HullWhite::fitted(0.05, PiecewiseConstant::constant(sig_d), Currency::Domestic, YieldCurve::flat(0.03)).unwrap();
        let f = HullWhite::fitted(0.08, PiecewiseConstant::constant(sig_f), Currency::Foreign, YieldCurve::flat(0.01)).unwrap();
        ThreeFactorModel::new(1.0, d, f, corr, LocalVolGrid::flat(sig_s).unwrap()).unwrap()
    }

    #[test]
    fn zero_vol_paths_follow_the_forward() {
        let m = model(0.0, 0.0, 0.0, Correlation3::default());
        let s = simulate_tforward(&m, 1.0, &SimSpec::new(4, 50, 1)).unwrap();
        for x in &s.samples {
            assert!((x.spot - 1.020_201_340_026_755_8).abs() < 1e-12);
            assert!((x.r_d - 0.03).abs() < 1e-9);
        }
        let e = expectation_term_mc(&s, 1.0);
        assert!((e.value - 0.019_797_986_599_732_4).abs() < 1e-9);
    }

    #[test]
    fn expectation_term_edge_strikes() {
        let m = model(0.2, 0.01, 0.01, Correlation3::default());
        let s = simulate_tforward(&m, 1.0, &SimSpec::new(2000, 20, 3)).unwrap();
        let lo = s.samples.iter().map(|x| x.spot).fold(f64::INFINITY, f64::min);
        let hi = s.samples.iter().map(|x| x.spot).fold(0.0, f64::max);
        assert_eq!(expectation_term_mc(&s, hi * 1.01).value, 0.0);
        let k = 0.5 * lo;
        let (rd, _) = s.estimate(|x| x.r_d);
        let (rfs, _) = s.estimate(|x| x.r_f * x.spot);
        assert!((expectation_term_mc(&s, k).value - (k * rd - rfs)).abs() < 1e-14);
    }

    #[test]
    fn domestic_rate_mean_is_the_initial_forward() {
        let m = model(0.0, 0.01, 0.0, Correlation3::default());
        let s = simulate_tforward(&m, 5.0, &SimSpec::new(20_000, 20, 11)).unwrap();
        let (mean, se) = s.estimate(|x| x.r_d);
        assert!((mean - 0.03).abs() < 3.0 * se.max(1e-6), "{mean} {se}");
    }

    #[test]
    fn spot_mean_matches_forward_parity() {
        let corr = Correlation3 { s_d: 0.3, s_f: -0.2, d_f: 0.25 };
        let m = model(0.2, 0.01, 0.012, corr);
        let spec = SimSpec { antithetic: false, ..SimSpec::new(40_000, 25, 5) };
        let s = simulate_tforward(&m, 3.0, &spec).unwrap();
        let (mean, se) = s.estimate(|x| x.spot);
        let fwd = m.forward(3.0);
        assert!((mean - fwd).abs() < 3.0 * se, "{mean} vs {fwd} se {se}");
    }

    #[test]
    fn risk_neutral_weights_reproduce_tforward_expectations() {
        let corr = Correlation3 { s_d: 0.2, s_f: 0.1, d_f: 0.3 };
        let m = model(0.15, 0.01, 0.01, corr);
        let spec = SimSpec::new(40_000, 25, 9);
        let dynamics = Dynamics::three_factor(&m).unwrap();
        let mut b = PathBundle::new(&dynamics, &spec).unwrap();
        b.advance(&dynamics, &m.local_vol, Measure::RiskNeutral, 1.0, &spec).unwrap();
        b.advance(&dynamics, &m.local_vol, Measure::RiskNeutral, 2.0, &spec).unwrap();
        let rn = b.samples(&dynamics, Measure::RiskNeutral);
        let (mean, se) = rn.estimate(|x| x.spot);
        assert!((mean - m.forward(2.0)).abs() < 3.0 * se);
        let (rd, se) = rn.estimate(|x| x.r_d);
        assert!((rd - 0.03).abs() < 3.0 * se);
    }

    #[test]
    fn samples_do_not_depend_on_thread_count() {
        let corr = Correlation3 { s_d: 0.2, s_f: 0.1, d_f: 0.3 };
        let m = model(0.2, 0.01, 0.01, corr);
        let spec = SimSpec::new(1000, 12, 77);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| simulate_tforward(&m, 2.0, &spec).unwrap().samples)
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn euler_spot_scheme_is_close_to_log_scheme() {
        let m = model(0.2, 0.0, 0.0, Correlation3::default());
        let spec = SimSpec { scheme: Scheme::EulerSpot, ..SimSpec::new(20_000, 100, 2) };
        let s = simulate_tforward(&m, 1.0, &spec).unwrap();
        let (mean, se) = s.estimate(|x| x.spot);
        assert!((mean - m.forward(1.0)).abs() < 3.0 * se + 1e-4);
        assert!(s.samples.iter().all(|x| x.spot > 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let m = model(0.2, 0.0, 0.0, Correlation3::default());
        assert!(simulate_tforward(&m, 1.0, &SimSpec::new(1, 10, 0)).is_err());
        assert!(simulate_tforward(&m, 1.0, &SimSpec::new(3, 10, 0)).is_err());
        assert!(simulate_tforward(&m, 0.0, &SimSpec::new(4, 10, 0)).is_err());
    }
}
