//! Forward Kolmogorov equation of `(ln S, x_d, x_f)` under the moving
//! t-forward measure.
//!
//! With `u = ln S`, `y = x_d`, `z = x_f` and local vol `s = sigma(t, e^u)`:
//!
//! ```text
//! psi_t = -d_u[(dphi + y - z - s^2/2) psi] + 1/2 d_uu[s^2 psi]
//!         -d_y[-a_d y psi] + 1/2 sd^2 psi_yy
//!         -d_z[(-a_f z - rho_sf sf s) psi] + 1/2 sf^2 psi_zz
//!         + rho_sd sd d_uy[s psi] + rho_sf sf d_uz[s psi] + rho_df sd sf psi_yz
//!         - (y + g_d(t)) psi
//! ```
//!
//! where `dphi = phi_d - phi_f` and `g_d = phi_d - f_d(0, t)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::localvol::ThreeFactorModel;
use crate::math::cholesky_psd;
use crate::pde::adi::{douglas_step, mixed_stability_ratio, Axis, Mesh, Operator};
use crate::pde::density::DensityGrid3;

/// Mesh and time-stepping settings of the PDE engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSpec {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    /// Half-width of each axis in standard deviations.
    #[serde(default = "default_n_std")]
    pub n_std: f64,
    pub dt: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Width of the initial Gaussian in log-spot cells.
    #[serde(default = "default_mollifier")]
    pub mollifier_cells: f64,
    /// Minimum market density relative to the density at the forward for a
    /// node to be evaluated rather than filled.
    #[serde(default = "default_ratio")]
    pub min_density_ratio: f64,
}

fn default_n_std() -> f64 {
    5.0
}
fn default_theta() -> f64 {
    0.5
}
fn default_mollifier() -> f64 {
    2.0
}
fn default_ratio() -> f64 {
    1e-4
}

impl PdeSpec {
    pub fn new(n_x: usize, n_y: usize, n_z: usize, dt: f64) -> Self {
        Self {
            n_x,
            n_y,
            n_z,
            n_std: default_n_std(),
            dt,
            theta: default_theta(),
            mollifier_cells: default_mollifier(),
            min_density_ratio: default_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 5 || self.n_y < 3 || self.n_z < 3 {
            return Err(invalid("PDE mesh needs n_x >= 5 and n_y, n_z >= 3"));
        }
        if !(self.dt > 0.0) || !(self.n_std > 0.0) || !(self.mollifier_cells > 0.0) {
            return Err(invalid("PDE dt, n_std and mollifier width must be positive"));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(invalid("Douglas theta must lie in [0.5, 1]"));
        }
        Ok(())
    }
}

/// Builds the `(u, y, z)` mesh covering the model's support up to `horizon`.
pub fn build_mesh(model: &ThreeFactorModel, horizon: f64, sigma_ref: f64, spec: &PdeSpec) -> Result<Mesh> {
    spec.validate()?;
    let (dom, fgn) = (&model.domestic, &model.foreign);
    let var_u = sigma_ref * sigma_ref * horizon + dom.integrated_variance(horizon) + fgn.integrated_variance(horizon);
    let std_u = var_u.sqrt().max(1e-3);
    let ln_f = model.forward(horizon).ln();
    let center = 0.5 * (model.spot.ln() + ln_f - 0.5 * var_u);
    let half_u = spec.n_std * std_u + 0.5 * (ln_f - model.spot.ln()).abs();
    let max_sigma = |m: &crate::rates::HullWhite| m.params().sigma.values().iter().fold(0.0f64, |a, b| a.max(*b));
    let (sd, sf) = (max_sigma(dom), max_sigma(fgn));
    let std_y = (sd * sd * (1.0 - (-2.0 * dom.alpha() * horizon).exp()) / (2.0 * dom.alpha())).sqrt();
    let std_z = (sf * sf * (1.0 - (-2.0 * fgn.alpha() * horizon).exp()) / (2.0 * fgn.alpha())).sqrt();
    let c = model.corr;
    let shift_y = dom.shift_convexity(horizon).abs();
    let shift_z = fgn.shift_convexity(horizon).abs()
        + c.s_f.abs() * sf * sigma_ref * horizon
        + c.d_f.abs() * sd * sf * horizon * horizon * 0.5;
    let half_y = (spec.n_std * std_y + shift_y).max(1e-3);
    let half_z = (spec.n_std * std_z + shift_z).max(1e-3);
    let rate_axis = |half: f64, n: usize, frozen: bool| {
        if frozen {
            let k = n / 2;
            let step = half / k as f64;
            Ok(Axis {
                min: -(k as f64) * step,
                step,
                len: n,
            })
        } else {
            Axis::uniform(-half, half, n)
        }
    };
    Mesh::new(vec![
        Axis::uniform(center - half_u, center + half_u, spec.n_x)?,
        rate_axis(half_y, spec.n_y, sd == 0.0)?,
        rate_axis(half_z, spec.n_z, sf == 0.0)?,
    ])
}

/// Gaussian approximation of the density at a small time `t0`, standing in
/// for the Dirac initial condition at time zero.
pub fn initial_density(model: &ThreeFactorModel, mesh: &Mesh, t0: f64, sigma0: f64) -> Result<DensityGrid3> {
    let ax = mesh.axes();
    let (dom, fgn) = (&model.domestic, &model.foreign);
    let (sd, sf) = (dom.sigma(0.0), fgn.sigma(0.0));
    let c = model.corr;
    let vols = [sigma0, sd, sf];
    let rho = c.matrix();
    let mut cov = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            cov[a * 3 + b] = rho[a * 3 + b] * vols[a] * vols[b] * t0;
        }
    }
    let frozen = |m: &crate::rates::HullWhite| m.params().sigma.values().iter().all(|v| *v == 0.0);
    let degenerate = [false, frozen(dom), frozen(fgn)];
    for a in 0..3 {
        if !degenerate[a] {
            cov[a * 4] = cov[a * 4].max(ax[a].step.powi(2));
        }
    }
    let l = cholesky_psd(&cov, 3)?;
    let mean = [
        model.forward(t0).ln() - 0.5 * cov[0],
        -dom.shift_convexity(t0),
        -c.s_f * sf * sigma0 * t0,
    ];
    let nearest: Vec<f64> = (0..3)
        .map(|a| {
            let k = ((mean[a] - ax[a].min) / ax[a].step).round().clamp(1.0, (ax[a].len - 2) as f64);
            ax[a].coord(k as usize)
        })
        .collect();
    let mut values = mesh.map_nodes(|x| {
        let mut w = [0.0; 3];
        let mut q = 0.0;
        for i in 0..3 {
            if degenerate[i] {
                if (x[i] - nearest[i]).abs() > 0.25 * ax[i].step {
                    return 0.0;
                }
                continue;
            }
            let mut r = x[i] - mean[i];
            for j in 0..i {
                r -= l[i * 3 + j] * w[j];
            }
            w[i] = r / l[i * 3 + i];
            q += w[i] * w[i];
        }
        (-0.5 * q).exp()
    });
    for (idx, v) in values.iter_mut().enumerate() {
        if !mesh.is_interior(idx) {
            *v = 0.0;
        }
    }
    let mass: f64 = crate::math::pairwise_sum(&values) * mesh.cell_volume();
    if !(mass > 0.0) {
        return Err(Error::Numeric("initial density has no mass on the mesh".into()));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(DensityGrid3 {
        mesh: mesh.clone(),
        values,
        time: t0,
        offset_d: dom.phi(t0),
        offset_f: fgn.phi(t0),
    })
}

/// Diagnostics of one time step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub mass: f64,
    /// Most negative value before the limiter, relative to the peak.
    pub worst_negative: f64,
    pub negative_nodes: usize,
    pub mixed_ratio: f64,
}

/// Advances the density by `dt` with local vols `vol_u` given on the
/// log-spot nodes. Negative undershoots are reported and set to zero; the
/// remaining values are rescaled to keep the mass of the scheme.
pub(crate) fn step_with_vol(
    density: &mut DensityGrid3,
    model: &ThreeFactorModel,
    vol_u: &[f64],
    dt: f64,
    theta: f64,
) -> Result<StepStats> {
    let mesh = &density.mesh;
    let ax = mesh.axes();
    let (nu, ny, nz) = (ax[0].len, ax[1].len, ax[2].len);
    let (t0, t1) = (density.time, density.time + dt);
    let tm = 0.5 * (t0 + t1);
    let (dom, fgn) = (&model.domestic, &model.foreign);
    let dphi = (dom.integrated_phi(t0, t1) - fgn.integrated_phi(t0, t1)) / dt;
    let g_d = 0.5 * (dom.integrated_variance(t1) - dom.integrated_variance(t0)) / dt;
    let (sd, sf) = (dom.sigma(tm), fgn.sigma(tm));
    let (ad, af) = (dom.alpha(), fgn.alpha());
    let c = model.corr;
    let n = mesh.size();
    let mut op = Operator::zeros(mesh);
    let mut kill = vec![0.0; n];
    let mut c_uy = vec![0.0; n];
    let mut c_uz = vec![0.0; n];
    let ys = ax[1].coords();
    let zs = ax[2].coords();
    for i in 0..nu {
        let s = vol_u[i];
        let s2 = s * s;
        for (j, &y) in ys.iter().enumerate() {
            let base = (i * ny + j) * nz;
            for (l, &z) in zs.iter().enumerate() {
                let idx = base + l;
                op.drift[0][idx] = dphi + y - z - 0.5 * s2;
                op.diffusion[0][idx] = s2;
                op.drift[1][idx] = -ad * y;
                op.diffusion[1][idx] = sd * sd;
                op.drift[2][idx] = -af * z - c.s_f * sf * s;
                op.diffusion[2][idx] = sf * sf;
                kill[idx] = y + g_d;
                c_uy[idx] = c.s_d * s * sd;
                c_uz[idx] = c.s_f * s * sf;
            }
        }
    }
    op.kill = Some((1, kill));
    if c.s_d * sd != 0.0 {
        op.mixed.push((0, 1, c_uy));
    }
    if c.s_f * sf != 0.0 {
        op.mixed.push((0, 2, c_uz));
    }
    if c.d_f * sd * sf != 0.0 {
        op.mixed.push((1, 2, vec![c.d_f * sd * sf; n]));
    }
    let mixed_ratio = mixed_stability_ratio(mesh, &op, dt);
    if mixed_ratio > 1.0 {
        return Err(invalid(format!(
            "time step {dt} too large for the explicit mixed-derivative terms (ratio {mixed_ratio:.3})"
        )));
    }
    douglas_step(mesh, &op, &mut density.values, dt, theta)?;
    let raw: f64 = crate::math::pairwise_sum(&density.values);
    let peak = density.values.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut worst = 0.0f64;
    let mut negatives = 0;
    for v in density.values.iter_mut() {
        if *v < 0.0 {
            worst = worst.min(*v / peak);
            negatives += 1;
            *v = 0.0;
        }
    }
    if negatives > 0 {
        let clipped = crate::math::pairwise_sum(&density.values);
        if clipped > 0.0 {
            let scale = raw / clipped;
            density.values.iter_mut().for_each(|v| *v *= scale);
        }
    }
    density.time = t1;
    density.offset_d = dom.phi(t1);
    density.offset_f = fgn.phi(t1);
    let mass = density.mass();
    if (mass - 1.0).abs() > 5e-3 {
        return Err(Error::MassDrift {
            time: t1,
            mass,
            tolerance: 5e-3,
        });
    }
    Ok(StepStats {
        mass,
        worst_negative: worst,
        negative_nodes: negatives,
        mixed_ratio,
    })
}

/// One Douglas ADI step using the model's own local volatility at the
/// density's current time.
pub fn fokker_planck_step(density: &DensityGrid3, model: &ThreeFactorModel, dt: f64) -> Result<DensityGrid3> {
    if !(dt > 0.0) {
        return Err(invalid("time step must be positive"));
    }
    let slice = model.local_vol.time_slice(density.time);
    let vol_u: Vec<f64> = density.mesh.axes()[0]
        .coords()
        .iter()
        .map(|u| model.local_vol.interp_spot(&slice, u.exp()))
        .collect();
    let mut next = density.clone();
    step_with_vol(&mut next, model, &vol_u, dt, 0.5)?;
    Ok(next)
}

/// Propagates the density under the model's own local volatility and
/// returns it at each of the increasing dates `times`.
pub fn forward_densities(model: &ThreeFactorModel, times: &[f64], spec: &PdeSpec) -> Result<Vec<DensityGrid3>> {
    spec.validate()?;
    crate::math::check_increasing("density dates", times)?;
    if !(times[0] > 0.0) {
        return Err(invalid("density dates must be positive"));
    }
    let horizon = times[times.len() - 1];
    let sigma_ref = model.local_vol.values().iter().fold(0.0f64, |m, v| m.max(*v));
    let mesh = build_mesh(model, horizon, sigma_ref.max(0.05), spec)?;
    let sigma0 = model.local_vol.sigma(0.0, model.spot);
    let h = mesh.axes()[0].step;
    let t0 = (spec.mollifier_cells * h / sigma0.max(1e-4)).powi(2).min(0.5 * times[0]);
    let mut density = initial_density(model, &mesh, t0, sigma0)?;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let n = ((target - density.time) / spec.dt - 1e-9).ceil().max(1.0) as usize;
        let dt = (target - density.time) / n as f64;
        for i in 0..n {
            let slice = model.local_vol.time_slice(density.time);
            let vol_u: Vec<f64> = density.mesh.axes()[0]
                .coords()
                .iter()
                .map(|u| model.local_vol.interp_spot(&slice, u.exp()))
                .collect();
            step_with_vol(&mut density, model, &vol_u, dt, spec.theta)?;
            if i + 1 == n {
                density.time = target;
            }
        }
        out.push(density.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localvol::{Correlation3, LocalVolGrid};
    use crate::rates::{Currency, HullWhite, PiecewiseConstant, YieldCurve};

    fn model(sig: f64, sd: f64, sf: f64, corr: Correlation3) -> ThreeFactorModel {
        let d = HullWhite::fitted(0.05, PiecewiseConstant::constant(sd), Currency::Domestic, YieldCurve::flat(0.03)).unwrap();
        let f = HullWhite::fitted(0.05, PiecewiseConstant::constant(sf), Currency::Foreign, YieldCurve::flat(0.01)).unwrap();
        ThreeFactorModel::new(1.0, d, f, corr, LocalVolGrid::flat(sig).unwrap()).unwrap()
    }

    fn run(m: &ThreeFactorModel, spec: &PdeSpec, horizon: f64, sig0: f64) -> DensityGrid3 {
        let mesh = build_mesh(m, horizon, sig0.max(0.05), spec).unwrap();
        let h = mesh.axes()[0].step;
        let t0 = if sig0 > 0.0 { (spec.mollifier_cells * h / sig0).powi(2).min(0.1) } else { 0.01 };
        let mut d = initial_density(m, &mesh, t0, sig0).unwrap();
        let n = ((horizon - t0) / spec.dt).ceil() as usize;
        let dt = (horizon - t0) / n as f64;
        for _ in 0..n {
            d = fokker_planck_step(&d, m, dt).unwrap();
        }
        d
    }

    #[test]
    fn deterministic_rates_advect_along_the_forward() {
        let m = model(0.2, 0.0, 0.0, Correlation3::default());
        let spec = PdeSpec::new(80, 5, 5, 0.02);
        let d = run(&m, &spec, 1.0, 0.2);
        assert!((d.mass() - 1.0).abs() < 1e-5, "mass {}", d.mass());
        assert!((d.mean_spot() / m.forward(1.0) - 1.0).abs() < 1e-3);
        assert!((d.mean_rd() - 0.03).abs() < 1e-9);
    }

    #[test]
    fn domestic_factor_has_hull_white_moments() {
        let m = model(0.0, 0.01, 0.0, Correlation3::default());
        let spec = PdeSpec::new(9, 61, 5, 0.02);
        let d = run(&m, &spec, 2.0, 0.0);
        let var_exact = 0.01f64.powi(2) * (1.0 - (-0.2f64).exp()) / 0.1;
        let mean = d.mean_rd();
        let var = d.expectation(|_, rd, _| (rd - mean).powi(2));
        assert!((mean - 0.03).abs() < 2e-5, "mean {mean}");
        assert!((var / var_exact - 1.0).abs() < 0.03, "var {var} vs {var_exact}");
    }

    #[test]
    fn full_model_conserves_mass() {
        let corr = Correlation3 { s_d: 0.3, s_f: -0.2, d_f: 0.25 };
        let m = model(0.2, 0.007, 0.007, corr);
        let spec = PdeSpec::new(40, 15, 15, 0.01);
        let d = run(&m, &spec, 1.0, 0.2);
        assert!((d.mass() - 1.0).abs() < 5e-3);
        assert!((d.mean_rd() - 0.03).abs() < 5e-4);
        assert!(d.min_relative() >= 0.0);
    }
}
