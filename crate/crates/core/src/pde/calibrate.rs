//! Forward PDE bootstrap: the density is stepped forward and the local
//! volatility is re-evaluated from it after every step.

use serde::{Deserialize, Serialize};

use crate::calibration::{evaluate_column, fill_nearest, Calibration, CalibrationGrid, NodeInput};
use crate::error::{Error, Result};
use crate::localvol::{LocalVolGrid, ThreeFactorModel, TimeInterp};
use crate::mc::market_support;
use crate::pde::density::{DensityGrid3, ExpectationKernel};
use crate::pde::fokker_planck::{build_mesh, initial_density, step_with_vol, PdeSpec};
use crate::surfaces::CallPriceSurface;

/// Run statistics of a PDE calibration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PdeRunStats {
    pub start_time: f64,
    pub steps: usize,
    pub max_mass_error: f64,
    pub worst_negative: f64,
    pub negative_nodes: usize,
    pub max_mixed_ratio: f64,
}

/// Result of [`calibrate_pde`].
#[derive(Debug, Clone)]
pub struct PdeCalibration {
    pub calibration: Calibration,
    pub stats: PdeRunStats,
    /// Density at the last calibration date.
    pub density: DensityGrid3,
}

/// Local vols on the log-spot mesh nodes at time `t`: the Dupire value
/// corrected by the rate deviation read from the density, when given.
fn node_vols(
    surface: &CallPriceSurface,
    kernel: Option<&ExpectationKernel>,
    t: f64,
    u: &[f64],
    ratio: f64,
) -> Result<Vec<f64>> {
    let strikes: Vec<f64> = u.iter().map(|x| x.exp()).collect();
    let atm = surface.forward(t);
    let dens_atm = surface.partials(atm, t).map(|p| p.d2_dk2).unwrap_or(0.0);
    let floor = surface.convexity_floor().max(ratio * dens_atm);
    let pd = surface.discount(t);
    let fd = surface.domestic().forward_unchecked(t);
    let ff = surface.foreign().forward_unchecked(t);
    let mut vols = Vec::with_capacity(strikes.len());
    for &k in &strikes {
        let p = match surface.partials(k, t) {
            Ok(p) => p,
            Err(Error::Domain(_)) => {
                vols.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        if p.d2_dk2 < floor {
            vols.push(f64::NAN);
            continue;
        }
        let q = -p.d_dk / pd;
        let mut e = fd * k * q - ff * (p.value / pd + k * q);
        if let Some(kern) = kernel {
            e += kern.rate_deviation(k, fd, ff);
        }
        let var = (p.d_dt - pd * e) / (0.5 * k * k * p.d2_dk2);
        vols.push(if var >= 0.0 { var.sqrt() } else { f64::NAN });
    }
    fill_nearest(&mut vols, &strikes)
        .ok_or_else(|| Error::Numeric(format!("no valid local-vol node on the PDE mesh at t={t}")))?;
    Ok(vols)
}

/// Forward PDE calibration of the local volatility on `grid`.
pub fn calibrate_pde(
    surface: &CallPriceSurface,
    model: &ThreeFactorModel,
    grid: &CalibrationGrid,
    spec: &PdeSpec,
) -> Result<PdeCalibration> {
    spec.validate()?;
    let horizon = *grid.times.last().unwrap();
    let t1 = grid.times[0];
    let sigma_ref = grid
        .times
        .iter()
        .map(|&t| {
            let f = surface.forward(t);
            let price = surface.price(f, t)?;
            crate::surfaces::implied_vol(
                price,
                surface.spot(),
                f,
                surface.domestic().zero_rate(t),
                surface.foreign().zero_rate(t),
                t,
            )
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    let mesh = build_mesh(model, horizon, sigma_ref, spec)?;
    let u = mesh.axes()[0].coords();
    let h = mesh.axes()[0].step;
    let atm_vol = {
        let f = surface.forward(t1);
        crate::surfaces::implied_vol(
            surface.price(f, t1)?,
            surface.spot(),
            f,
            surface.domestic().zero_rate(t1),
            surface.foreign().zero_rate(t1),
            t1,
        )?
    };
    let t0 = (spec.mollifier_cells * h / atm_vol.max(1e-4)).powi(2).min(0.5 * t1);
    let mut density = initial_density(model, &mesh, t0, atm_vol)?;
    let mut vols = node_vols(surface, None, t0, &u, spec.min_density_ratio)?;
    let mut stats = PdeRunStats {
        start_time: t0,
        ..Default::default()
    };
    let mut values = Vec::with_capacity(grid.times.len() * grid.strikes.len());
    let mut diagnostics = Vec::new();
    let mut t = t0;
    for &target in &grid.times {
        let n = ((target - t) / spec.dt - 1e-9).ceil().max(1.0) as usize;
        let dt = (target - t) / n as f64;
        for i in 0..n {
            let st = step_with_vol(&mut density, model, &vols, dt, spec.theta)?;
            if i + 1 == n {
                density.time = target;
            }
            stats.steps += 1;
            stats.max_mass_error = stats.max_mass_error.max((st.mass - 1.0).abs());
            stats.worst_negative = stats.worst_negative.min(st.worst_negative);
            stats.negative_nodes += st.negative_nodes;
            stats.max_mixed_ratio = stats.max_mixed_ratio.max(st.mixed_ratio);
            let kernel = ExpectationKernel::new(&density);
            vols = node_vols(surface, Some(&kernel), density.time, &u, spec.min_density_ratio)?;
        }
        t = target;
        let kernel = ExpectationKernel::new(&density);
        let pd = surface.discount(t);
        let fd = surface.domestic().forward_unchecked(t);
        let ff = surface.foreign().forward_unchecked(t);
        let support = market_support(surface, t, &grid.strikes, spec.min_density_ratio)?;
        let inputs = grid
            .strikes
            .iter()
            .zip(support)
            .map(|(&k, supported)| {
                let mut term = kernel.term(k)?;
                let p = surface.partials(k, t)?;
                let q = -p.d_dk / pd;
                term.value = fd * k * q - ff * (p.value / pd + k * q) + kernel.rate_deviation(k, fd, ff);
                Ok(NodeInput {
                    term: Some(term),
                    supported,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (col, diag) = evaluate_column(surface, t, &grid.strikes, &inputs)?;
        values.extend(col);
        diagnostics.extend(diag);
    }
    let out = LocalVolGrid::new(grid.times.clone(), grid.strikes.clone(), values)?.with_time_interp(TimeInterp::Linear);
    Ok(PdeCalibration {
        calibration: Calibration {
            grid: out,
            diagnostics,
        },
        stats,
        density,
    })
}
