//! Stochastic-volatility mimicking and the four-factor hybrid model.
//!
//! The hybrid spot volatility is `sigma_LOC2(t, S) * gamma(nu(t))` where
//! `nu` follows the Schobel-Zhu Ornstein-Uhlenbeck dynamics
//!
//! ```text
//! d nu = k (lambda - nu) dt + xi dW_nu
//! ```
//!
//! The leverage `sigma_LOC2` is bootstrapped so that the spot marginals of
//! the hybrid model match those of a pure local-volatility model `sigma_LOC1`:
//! `sigma_LOC2^2(t, K) = sigma_LOC1^2(t, K) / E^{Q_t}[gamma^2 | S(t) = K]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::localvol::{LocalVolGrid, ThreeFactorModel, TimeInterp};
use crate::math::{check_increasing, cholesky_psd, interp_linear_flat, pairwise_sum};
use crate::mc::{Dynamics, Measure, PathBundle, PathMode, SampleSet, SimSpec, VolFactor};
use crate::pde::adi::{douglas_step, mixed_stability_ratio, Axis, Mesh, Operator};
use crate::pde::fokker_planck::{build_mesh, PdeSpec};
use crate::rates::HullWhiteParams;

/// Functional form of the stochastic volatility multiplier `gamma(nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSpec {
    #[default]
    Identity,
    Sqrt,
    ExpSqrt,
}

impl GammaSpec {
    #[inline]
    pub fn eval(&self, nu: f64) -> f64 {
        match self {
            GammaSpec::Identity => nu,
            GammaSpec::Sqrt => nu.max(0.0).sqrt(),
            GammaSpec::ExpSqrt => nu.max(0.0).sqrt().exp(),
        }
    }
}

/// Schobel-Zhu volatility factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchobelZhuParams {
    pub k: f64,
    pub lambda: f64,
    pub xi: f64,
    pub nu0: f64,
    #[serde(default)]
    pub rho_s_nu: f64,
    #[serde(default)]
    pub rho_d_nu: f64,
}

impl SchobelZhuParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(invalid(format!("mean reversion k must be positive, got {}", self.k)));
        }
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(invalid(format!("vol-of-vol xi must be non-negative, got {}", self.xi)));
        }
        if !self.lambda.is_finite() || !self.nu0.is_finite() {
            return Err(invalid("lambda and nu0 must be finite"));
        }
        for (name, r) in [("rho_s_nu", self.rho_s_nu), ("rho_d_nu", self.rho_d_nu)] {
            if !(-1.0..=1.0).contains(&r) {
                return Err(invalid(format!("correlation {name} = {r} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Mean and variance of a Gaussian variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SzMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Moments of `nu(T)` under the domestic `T`-forward measure given
/// `nu(t) = params.nu0`. Requires a constant domestic rate volatility.
pub fn sz_tforward_moments(params: &SchobelZhuParams, hw_d: &HullWhiteParams, t: f64, maturity: f64) -> Result<SzMoments> {
    params.validate()?;
    if !(t >= 0.0) || !(maturity >= t) {
        return Err(crate::error::domain(format!("need 0 <= t <= T, got t={t}, T={maturity}")));
    }
    if !hw_d.sigma.is_constant() {
        return Err(invalid("closed-form moments need a constant domestic rate volatility"));
    }
    let (k, a) = (params.k, hw_d.alpha);
    let sd = hw_d.sigma.values()[0];
    let tau = maturity - t;
    let c = params.rho_d_nu * sd * params.xi;
    let ek = (-k * tau).exp();
    let mean = params.nu0 * ek + (params.lambda - c / (a * k)) * (1.0 - ek)
        + c / (a * (a + k)) * (1.0 - (-(a + k) * tau).exp());
    let variance = params.xi * params.xi * (1.0 - (-2.0 * k * tau).exp()) / (2.0 * k);
    Ok(SzMoments { mean, variance })
}

/// Local variance mimicking `sigma = nu` under spot-vol independence:
/// `E^{Q_T}[nu(T)^2] = mean^2 + variance`.
pub fn mimic_local_vol_closed_form(params: &SchobelZhuParams, hw_d: &HullWhiteParams, maturity: f64) -> Result<f64> {
    let m = sz_tforward_moments(params, hw_d, 0.0, maturity)?;
    Ok(m.mean * m.mean + m.variance)
}

/// Three-factor model whose local volatility (`sigma_LOC2`) is multiplied
/// by `gamma(nu)`.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub base: ThreeFactorModel,
    pub sz: SchobelZhuParams,
    pub gamma: GammaSpec,
    pub rho_f_nu: f64,
}

impl HybridModel {
    pub fn new(base: ThreeFactorModel, sz: SchobelZhuParams, gamma: GammaSpec, rho_f_nu: f64) -> Result<Self> {
        sz.validate()?;
        if gamma != GammaSpec::Identity && !(sz.xi == 0.0 && sz.nu0 > 0.0 && sz.lambda > 0.0) {
            return Err(invalid(format!(
                "gamma {gamma:?} needs a positive volatility factor; Ornstein-Uhlenbeck dynamics reach negative values unless xi = 0 and nu0, lambda > 0"
            )));
        }
        let m = Self {
            base,
            sz,
            gamma,
            rho_f_nu,
        };
        m.dynamics()?;
        Ok(m)
    }

    /// Full correlation matrix of `(S, r_d, r_f, nu)`, row-major.
    pub fn correlation(&self) -> [f64; 16] {
        let c = self.base.corr;
        let (sn, dn, fnu) = (self.sz.rho_s_nu, self.sz.rho_d_nu, self.rho_f_nu);
        [
            1.0, c.s_d, c.s_f, sn, //
            c.s_d, 1.0, c.d_f, dn, //
            c.s_f, c.d_f, 1.0, fnu, //
            sn, dn, fnu, 1.0,
        ]
    }

    pub fn with_local_vol(&self, local_vol: LocalVolGrid) -> Self {
        Self {
            base: self.base.with_local_vol(local_vol),
            ..self.clone()
        }
    }

    pub(crate) fn dynamics(&self) -> Result<Dynamics> {
        let factor = VolFactor {
            k: self.sz.k,
            lambda: self.sz.lambda,
            xi: self.sz.xi,
            nu0: self.sz.nu0,
            gamma: self.gamma,
        };
        Dynamics::with_vol_factor(&self.base, factor, [self.sz.rho_s_nu, self.sz.rho_d_nu, self.rho_f_nu])
    }
}

/// Simulates `(S, r_d, r_f, nu)` at `horizon` under the domestic
/// T-forward measure.
pub fn simulate_hybrid_tforward(model: &HybridModel, horizon: f64, spec: &SimSpec) -> Result<SampleSet> {
    if !(horizon > 0.0) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    let dynamics = model.dynamics()?;
    let mut bundle = PathBundle::new(&dynamics, spec)?;
    let measure = Measure::TForward(horizon);
    bundle.advance(&dynamics, &model.base.local_vol, measure, horizon, spec)?;
    Ok(bundle.samples(&dynamics, measure))
}

/// Settings of the binned (top-hat kernel) conditional estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedOptions {
    /// Fixed bin width; defaults to the local strike spacing.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    /// Bins with fewer samples are widened.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Number of bandwidth doublings before giving up.
    #[serde(default = "default_max_widenings")]
    pub max_widenings: u32,
}

fn default_min_count() -> usize {
    50
}

fn default_max_widenings() -> u32 {
    6
}

impl Default for BinnedOptions {
    fn default() -> Self {
        Self {
            bandwidth: None,
            min_count: default_min_count(),
            max_widenings: default_max_widenings(),
        }
    }
}

/// Estimate of `E^{Q_t}[gamma^2 | S(t) = K]` at one strike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGamma2 {
    pub strike: f64,
    pub value: f64,
    pub std_error: Option<f64>,
    /// Samples in the bin (zero for the density estimator).
    pub count: usize,
    /// Final bin width, or the log-spot mesh step for the density estimator.
    pub bandwidth: f64,
}

fn strike_spacing(strikes: &[f64], j: usize) -> f64 {
    let n = strikes.len();
    if n == 1 {
        return 0.1 * strikes[0];
    }
    if j == 0 {
        strikes[1] - strikes[0]
    } else if j + 1 == n {
        strikes[n - 1] - strikes[n - 2]
    } else {
        0.5 * (strikes[j + 1] - strikes[j - 1])
    }
}

/// Binned particle estimate of `E[gamma^2(nu) | S = K]` for each strike:
/// the (weighted) average of `gamma^2` over samples with `|S - K| <= h/2`.
pub fn conditional_gamma2(
    samples: &SampleSet,
    gamma: GammaSpec,
    strikes: &[f64],
    options: &BinnedOptions,
) -> Result<Vec<ConditionalGamma2>> {
    check_increasing("strikes", strikes)?;
    if samples.samples.iter().any(|s| s.nu.is_none()) {
        return Err(invalid("samples carry no volatility factor"));
    }
    let mut order: Vec<usize> = (0..samples.samples.len()).collect();
    order.sort_by(|&a, &b| samples.samples[a].spot.total_cmp(&samples.samples[b].spot));
    let spots: Vec<f64> = order.iter().map(|&i| samples.samples[i].spot).collect();
    let g2: Vec<f64> = order
        .iter()
        .map(|&i| gamma.eval(samples.samples[i].nu.unwrap_or(0.0)).powi(2))
        .collect();
    let w: Vec<f64> = match &samples.weights {
        Some(w) => order.iter().map(|&i| w[i]).collect(),
        None => vec![1.0; order.len()],
    };
    strikes
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mut h = options.bandwidth.unwrap_or_else(|| strike_spacing(strikes, j));
            if !(h > 0.0) {
                return Err(invalid(format!("bandwidth must be positive, got {h}")));
            }
            for _ in 0..=options.max_widenings {
                let lo = spots.partition_point(|&s| s < k - 0.5 * h);
                let hi = spots.partition_point(|&s| s <= k + 0.5 * h);
                let count = hi - lo;
                if count >= options.min_count.max(1) {
                    let ws = pairwise_sum(&w[lo..hi]);
                    let wg: Vec<f64> = (lo..hi).map(|i| w[i] * g2[i]).collect();
                    let value = pairwise_sum(&wg) / ws;
                    let dev: Vec<f64> = (lo..hi).map(|i| (w[i] * (g2[i] - value)).powi(2)).collect();
                    let std_error = pairwise_sum(&dev).sqrt() / ws;
                    return Ok(ConditionalGamma2 {
                        strike: k,
                        value,
                        std_error: Some(std_error),
                        count,
                        bandwidth: h,
                    });
                }
                h *= 2.0;
            }
            Err(Error::EmptyBin {
                strike: k,
                bandwidth: 0.5 * h,
            })
        })
        .collect()
}

/// Mesh and step settings of the four-dimensional forward equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pde4Spec {
    pub n_u: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub n_nu: usize,
    pub n_std: f64,
    pub dt: f64,
}

impl Pde4Spec {
    pub fn new(n_u: usize, n_y: usize, n_z: usize, n_nu: usize, dt: f64) -> Self {
        Self {
            n_u,
            n_y,
            n_z,
            n_nu,
            n_std: 5.0,
            dt,
        }
    }
}

fn gaussian_nd(mesh: &Mesh, mean: &[f64], cov: &[f64], frozen: &[bool]) -> Result<Vec<f64>> {
    let d = mesh.dim();
    let l = cholesky_psd(cov, d)?;
    let ax = mesh.axes();
    let nearest: Vec<f64> = (0..d)
        .map(|a| {
            let k = ((mean[a] - ax[a].min) / ax[a].step).round().clamp(1.0, (ax[a].len - 2) as f64);
            ax[a].coord(k as usize)
        })
        .collect();
    let mut values = mesh.map_nodes(|x| {
        let mut w = [0.0f64; 8];
        let mut q = 0.0;
        for i in 0..d {
            if frozen[i] {
                if (x[i] - nearest[i]).abs() > 0.25 * ax[i].step {
                    return 0.0;
                }
                continue;
            }
            let mut r = x[i] - mean[i];
            for j in 0..i {
                r -= l[i * d + j] * w[j];
            }
            w[i] = r / l[i * d + i];
            q += w[i] * w[i];
        }
        (-0.5 * q).exp()
    });
    for (idx, v) in values.iter_mut().enumerate() {
        if !mesh.is_interior(idx) {
            *v = 0.0;
        }
    }
    let mass = pairwise_sum(&values) * mesh.cell_volume();
    if !(mass > 0.0) {
        return Err(Error::Numeric("initial density has no mass on the mesh".into()));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(values)
}

/// `E^{Q_t}[gamma^2 | S(t) = K]` as the ratio of density integrals, with
/// the joint density of `(ln S, x_d, x_f, nu)` propagated by the forward
/// equation on a coarse mesh. Intended as a cross-check of the binned
/// estimator; needs `xi > 0`.
pub fn conditional_gamma2_pde(
    model: &HybridModel,
    t: f64,
    strikes: &[f64],
    spec: &Pde4Spec,
) -> Result<Vec<ConditionalGamma2>> {
    check_increasing("strikes", strikes)?;
    if !(t > 0.0) || !(spec.dt > 0.0) {
        return Err(invalid("time and step must be positive"));
    }
    if !(model.sz.xi > 0.0) {
        return Err(invalid("the density estimator needs a stochastic volatility factor (xi > 0)"));
    }
    if spec.n_u < 5 || spec.n_y < 3 || spec.n_z < 3 || spec.n_nu < 5 {
        return Err(invalid("four-dimensional mesh is too small"));
    }
    let base = &model.base;
    let sz = model.sz;
    let (dom, fgn) = (&base.domestic, &base.foreign);
    let sd_nu = sz.xi * ((1.0 - (-2.0 * sz.k * t).exp()) / (2.0 * sz.k)).sqrt();
    let m_nu = sz.nu0 * (-sz.k * t).exp() + sz.lambda * (1.0 - (-sz.k * t).exp());
    let nu_lo = sz.nu0.min(m_nu) - spec.n_std * sd_nu;
    let nu_hi = sz.nu0.max(m_nu) + spec.n_std * sd_nu;
    let g_max = [nu_lo, nu_hi, sz.nu0]
        .iter()
        .map(|v| model.gamma.eval(*v).abs())
        .fold(0.0f64, f64::max);
    let lv_max = base.local_vol.values().iter().fold(0.0f64, |m, v| m.max(*v));
    let sigma_ref = (lv_max * g_max).max(0.05);
    let mesh3 = build_mesh(
        base,
        t,
        sigma_ref,
        &PdeSpec {
            n_std: spec.n_std,
            ..PdeSpec::new(spec.n_u, spec.n_y, spec.n_z, spec.dt)
        },
    )?;
    let mut axes = mesh3.axes().to_vec();
    axes.push(Axis::uniform(nu_lo, nu_hi, spec.n_nu)?);
    let mesh = Mesh::new(axes)?;
    let ax = mesh.axes().to_vec();
    let (nu_n, ny, nz, nn) = (ax[0].len, ax[1].len, ax[2].len, ax[3].len);

    let us = ax[0].coords();
    let nus = ax[3].coords();
    let gam: Vec<f64> = nus.iter().map(|v| model.gamma.eval(*v)).collect();
    let s0 = base.local_vol.sigma(0.0, base.spot) * model.gamma.eval(sz.nu0);
    let t0 = ((2.0 * ax[0].step / s0.max(1e-4)).powi(2)).min(0.1 * t);
    let frozen_rate = |m: &crate::rates::HullWhite| m.params().sigma.values().iter().all(|v| *v == 0.0);
    let frozen = [false, frozen_rate(dom), frozen_rate(fgn), false];
    let vols = [s0, dom.sigma(0.0), fgn.sigma(0.0), sz.xi];
    let rho = model.correlation();
    let mut cov = [0.0; 16];
    for a in 0..4 {
        for b in 0..4 {
            cov[a * 4 + b] = rho[a * 4 + b] * vols[a] * vols[b] * t0;
        }
    }
    for a in 0..4 {
        if !frozen[a] {
            cov[a * 5] = cov[a * 5].max((0.5 * ax[a].step).powi(2));
        }
    }
    let mean = [
        base.forward(t0).ln() - 0.5 * cov[0],
        -dom.shift_convexity(t0),
        -base.corr.s_f * fgn.sigma(0.0) * s0 * t0,
        sz.nu0 + sz.k * (sz.lambda - sz.nu0) * t0,
    ];
    let mut psi = gaussian_nd(&mesh, &mean, &cov, &frozen)?;

    let n_steps = ((t - t0) / spec.dt - 1e-9).ceil().max(1.0) as usize;
    let dt = (t - t0) / n_steps as f64;
    let n = mesh.size();
    let c = base.corr;
    let (r_sn, r_dn, r_fn) = (sz.rho_s_nu, sz.rho_d_nu, model.rho_f_nu);
    let mut time = t0;
    for _ in 0..n_steps {
        let (ta, tb) = (time, time + dt);
        let tm = 0.5 * (ta + tb);
        let dphi = (dom.integrated_phi(ta, tb) - fgn.integrated_phi(ta, tb)) / dt;
        let g_d = 0.5 * (dom.integrated_variance(tb) - dom.integrated_variance(ta)) / dt;
        let (sd, sf) = (dom.sigma(tm), fgn.sigma(tm));
        let slice = base.local_vol.time_slice(ta);
        let lv: Vec<f64> = us.iter().map(|u| base.local_vol.interp_spot(&slice, u.exp())).collect();
        let mut op = Operator::zeros(&mesh);
        let mut kill = vec![0.0; n];
        let mut mixed: Vec<(usize, usize, Vec<f64>)> = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
            .iter()
            .map(|&(a, b)| (a, b, vec![0.0; n]))
            .collect();
        for i in 0..nu_n {
            for j in 0..ny {
                let y = ax[1].coord(j);
                for l in 0..nz {
                    let z = ax[2].coord(l);
                    for (m, (&nu, &g)) in nus.iter().zip(&gam).enumerate() {
                        let idx = ((i * ny + j) * nz + l) * nn + m;
                        let s = lv[i] * g;
                        op.drift[0][idx] = dphi + y - z - 0.5 * s * s;
                        op.diffusion[0][idx] = s * s;
                        op.drift[1][idx] = -dom.alpha() * y;
                        op.diffusion[1][idx] = sd * sd;
                        op.drift[2][idx] = -fgn.alpha() * z - c.s_f * sf * s;
                        op.diffusion[2][idx] = sf * sf;
                        op.drift[3][idx] = sz.k * (sz.lambda - nu);
                        op.diffusion[3][idx] = sz.xi * sz.xi;
                        kill[idx] = y + g_d;
                        mixed[0].2[idx] = c.s_d * s * sd;
                        mixed[1].2[idx] = c.s_f * s * sf;
                        mixed[2].2[idx] = r_sn * s * sz.xi;
                        mixed[3].2[idx] = c.d_f * sd * sf;
                        mixed[4].2[idx] = r_dn * sd * sz.xi;
                        mixed[5].2[idx] = r_fn * sf * sz.xi;
                    }
                }
            }
        }
        op.kill = Some((1, kill));
        op.mixed = mixed.into_iter().filter(|(_, _, v)| v.iter().any(|x| *x != 0.0)).collect();
        let ratio = mixed_stability_ratio(&mesh, &op, dt);
        if ratio > 1.0 {
            return Err(invalid(format!(
                "time step {dt} too large for the explicit mixed-derivative terms (ratio {ratio:.3})"
            )));
        }
        douglas_step(&mesh, &op, &mut psi, dt, 0.5)?;
        let raw = pairwise_sum(&psi);
        psi.iter_mut().for_each(|v| *v = v.max(0.0));
        let clipped = pairwise_sum(&psi);
        if clipped > 0.0 {
            psi.iter_mut().for_each(|v| *v *= raw / clipped);
        }
        time = tb;
        let mass = raw * mesh.cell_volume();
        if (mass - 1.0).abs() > 5e-3 {
            return Err(Error::MassDrift {
                time,
                mass,
                tolerance: 5e-3,
            });
        }
    }

    let mut m0 = vec![0.0; nu_n];
    let mut m2 = vec![0.0; nu_n];
    let per_u = ny * nz * nn;
    m0.par_iter_mut()
        .zip(m2.par_iter_mut())
        .enumerate()
        .for_each(|(i, (a, b))| {
            for (r, v) in psi[i * per_u..(i + 1) * per_u].iter().enumerate() {
                let g = gam[r % nn];
                *a += v;
                *b += v * g * g;
            }
        });
    strikes
        .iter()
        .map(|&k| {
            let x = k.ln();
            let den = interp_linear_flat(&us, &m0, x);
            let num = interp_linear_flat(&us, &m2, x);
            if !(den > 0.0) {
                return Err(Error::EmptyBin {
                    strike: k,
                    bandwidth: ax[0].step,
                });
            }
            Ok(ConditionalGamma2 {
                strike: k,
                value: num / den,
                std_error: None,
                count: 0,
                bandwidth: ax[0].step,
            })
        })
        .collect()
}

/// Settings of the leverage bootstrap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridOptions {
    #[serde(default)]
    pub path_mode: PathMode,
    #[serde(default)]
    pub binned: BinnedOptions,
}

/// Conditional expectations used for one leverage column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridColumn {
    pub time: f64,
    pub nodes: Vec<ConditionalGamma2>,
}

/// Result of [`calibrate_hybrid_loc2`].
#[derive(Debug, Clone)]
pub struct HybridCalibration {
    pub grid: LocalVolGrid,
    pub columns: Vec<HybridColumn>,
}

const DENOMINATOR_FLOOR: f64 = 1e-10;

/// Bootstraps the leverage `sigma_LOC2` on `times x strikes` from the pure
/// local volatility `loc1`. The column at time zero is
/// `sigma_LOC1(0, K) / gamma(nu0)`; every later column divides
/// `sigma_LOC1(t_k, K)` by the root of the conditional expectation
/// estimated from hybrid paths simulated with the columns already built.
pub fn calibrate_hybrid_loc2(
    loc1: &LocalVolGrid,
    model: &HybridModel,
    times: &[f64],
    strikes: &[f64],
    spec: &SimSpec,
    options: &HybridOptions,
) -> Result<HybridCalibration> {
    check_increasing("hybrid calibration times", times)?;
    check_increasing("hybrid calibration strikes", strikes)?;
    spec.validate()?;
    if times[0] < 0.0 || strikes[0] <= 0.0 {
        return Err(invalid("hybrid calibration times must be non-negative and strikes positive"));
    }
    let g0 = model.gamma.eval(model.sz.nu0).powi(2);
    if g0 < DENOMINATOR_FLOOR {
        return Err(Error::DegenerateDenominator {
            strike: model.base.spot,
            maturity: 0.0,
            value: g0,
        });
    }
    let mut nodes = vec![0.0];
    nodes.extend(times.iter().copied().filter(|&t| t > 0.0));
    let mut values: Vec<f64> = strikes.iter().map(|&k| loc1.sigma(0.0, k) / g0.sqrt()).collect();
    let mut columns = vec![HybridColumn {
        time: 0.0,
        nodes: strikes
            .iter()
            .map(|&k| ConditionalGamma2 {
                strike: k,
                value: g0,
                std_error: Some(0.0),
                count: 0,
                bandwidth: 0.0,
            })
            .collect(),
    }];
    let mut reuse = match options.path_mode {
        PathMode::Reuse => {
            let d = model.dynamics()?;
            let b = PathBundle::new(&d, spec)?;
            Some((d, b))
        }
        PathMode::Resimulate => None,
    };
    for k in 1..nodes.len() {
        let t = nodes[k];
        let partial = LocalVolGrid::new(nodes[..k].to_vec(), strikes.to_vec(), values.clone())?
            .with_time_interp(TimeInterp::PiecewiseConstant);
        let current = model.with_local_vol(partial.clone());
        let samples = match reuse.as_mut() {
            Some((d, bundle)) => {
                d.model = current.base.clone();
                bundle.advance(d, &partial, Measure::RiskNeutral, t, spec)?;
                bundle.samples(d, Measure::RiskNeutral)
            }
            None => simulate_hybrid_tforward(&current, t, spec)?,
        };
        let cond = conditional_gamma2(&samples, model.gamma, strikes, &options.binned)?;
        for c in &cond {
            if !(c.value >= DENOMINATOR_FLOOR) {
                return Err(Error::DegenerateDenominator {
                    strike: c.strike,
                    maturity: t,
                    value: c.value,
                });
            }
            values.push(loc1.sigma(t, c.strike) / c.value.sqrt());
        }
        columns.push(HybridColumn { time: t, nodes: cond });
    }
    let grid = LocalVolGrid::new(nodes, strikes.to_vec(), values)?.with_time_interp(TimeInterp::PiecewiseConstant);
    Ok(HybridCalibration { grid, columns })
}
