//! The `dupire`, `calibrate` and `hybrid` commands.

use std::fmt::Write as _;
use std::path::Path;

use fxlv_core::io::{self, GridMetadata};
use fxlv_core::surfaces::implied_vol;
use fxlv_core::{
    calibrate_dupire, calibrate_hybrid_loc2, calibrate_mc, calibrate_pde, expectation_term_mc, expectation_term_pde,
    forward_densities, simulate_hybrid_tforward, simulate_tforward, CallPriceSurface, Calibration, HybridModel,
    LocalVolGrid, PdeSpec, SampleSet, SimSpec, ThreeFactorModel,
};
use serde_json::json;

use crate::config::{sub_seed, Engine, Inputs};
use crate::error::{config, Result};
use crate::manifest::{Manifest, RunOutput};

pub const LOC_GRID: &str = "loc_grid";
pub const LOC1_GRID: &str = "loc1_grid";
pub const LOC2_GRID: &str = "loc2_grid";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const CONVERGENCE: &str = "convergence.csv";
pub const HYBRID_DIAGNOSTICS: &str = "hybrid_diagnostics.csv";
pub const REPRICING: &str = "repricing.csv";

const CONVERGENCE_STREAM: u64 = 1;
const HYBRID_STREAM: u64 = 2;
const REPRICE_STREAM: u64 = 3;

fn grid_bytes(grid: &LocalVolGrid, meta: &GridMetadata) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut csv = Vec::new();
    io::write_grid_csv(&mut csv, grid)?;
    let mut json = serde_json::to_vec_pretty(meta).map_err(fxlv_core::Error::from)?;
    json.push(b'\n');
    Ok((csv, json))
}

fn write_grid(out: &mut RunOutput, stem: &str, grid: &LocalVolGrid, meta: &GridMetadata) -> Result<()> {
    let (csv, json) = grid_bytes(grid, meta)?;
    out.write(&format!("{stem}.csv"), &csv)?;
    out.write(&format!("{stem}.json"), &json)
}

fn write_calibration(out: &mut RunOutput, cal: &Calibration, meta: &GridMetadata) -> Result<()> {
    write_grid(out, LOC_GRID, &cal.grid, meta)?;
    let mut diag = Vec::new();
    io::write_diagnostics_csv(&mut diag, &cal.diagnostics)?;
    out.write(DIAGNOSTICS, &diag)
}

/// Classical Dupire grid under deterministic rates.
pub fn dupire(inputs: &Inputs, out_dir: &Path) -> Result<Manifest> {
    let market = inputs.market()?;
    let grid = inputs.grid()?;
    let cal = calibrate_dupire(&market, &grid, inputs.config.grid.min_density_ratio)?;
    let mut meta = GridMetadata::for_grid(&cal.grid, inputs.model_hash());
    meta.provenance.insert("engine".into(), json!("dupire"));
    let mut out = RunOutput::create(out_dir)?;
    write_calibration(&mut out, &cal, &meta)?;
    out.finish(inputs, "dupire", None)
}

/// Strike of the calibration grid closest to the forward at `t`.
fn atm_strike(market: &CallPriceSurface, strikes: &[f64], t: f64) -> f64 {
    let f = market.forward(t);
    strikes
        .iter()
        .copied()
        .min_by(|a, b| (a - f).abs().total_cmp(&(b - f).abs()))
        .expect("grid has strikes")
}

struct ConvergenceRow {
    resolution: usize,
    maturity: f64,
    strike: f64,
    value: f64,
    se: Option<f64>,
}

fn convergence_csv(engine: Engine, rows: &[ConvergenceRow]) -> Vec<u8> {
    let name = match engine {
        Engine::Mc => "mc",
        Engine::Pde => "pde",
    };
    let mut s = String::from("engine,resolution,T,K,exp_term,se\n");
    for r in rows {
        let se = r.se.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{name},{},{},{},{},{se}", r.resolution, r.maturity, r.strike, r.value);
    }
    s.into_bytes()
}

/// Expectation term at the last date and the ATM strike from nested path
/// subsets of one simulation under the calibrated grid.
fn mc_convergence(model: &ThreeFactorModel, spec: &SimSpec, t: f64, strike: f64) -> Result<Vec<ConvergenceRow>> {
    let spec = SimSpec {
        seed: sub_seed(spec.seed, CONVERGENCE_STREAM),
        ..spec.clone()
    };
    let full = simulate_tforward(model, t, &spec)?;
    let per_unit = full.paths_per_unit;
    let units = full.samples.len() / per_unit;
    let mut rows = Vec::new();
    let mut u = units;
    let mut sizes = Vec::new();
    while u >= 2 && sizes.len() < 6 {
        sizes.push(u);
        u /= 2;
    }
    for &u in sizes.iter().rev() {
        let sub = SampleSet {
            horizon: full.horizon,
            samples: full.samples[..u * per_unit].to_vec(),
            paths_per_unit: per_unit,
            weights: full.weights.as_ref().map(|w| w[..u * per_unit].to_vec()),
        };
        let term = expectation_term_mc(&sub, strike);
        rows.push(ConvergenceRow {
            resolution: u * per_unit,
            maturity: t,
            strike,
            value: term.value,
            se: term.std_error,
        });
    }
    Ok(rows)
}

/// Expectation term at the last date and the ATM strike on the configured
/// mesh and with the spot axis and time step coarsened by 2 and 4.
fn pde_convergence(model: &ThreeFactorModel, spec: &PdeSpec, t: f64, strike: f64) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::new();
    for f in [4, 2, 1] {
        let coarse = PdeSpec {
            n_x: spec.n_x / f,
            dt: spec.dt * f as f64,
            ..spec.clone()
        };
        if coarse.validate().is_err() {
            continue;
        }
        let density = forward_densities(model, &[t], &coarse)?.pop().expect("one date");
        let term = expectation_term_pde(&density, strike)?;
        rows.push(ConvergenceRow {
            resolution: coarse.n_x,
            maturity: t,
            strike,
            value: term.value,
            se: None,
        });
    }
    Ok(rows)
}

fn calibrate_with(
    inputs: &Inputs,
    engine: Engine,
    market: &CallPriceSurface,
    model: &ThreeFactorModel,
) -> Result<(Calibration, GridMetadata, Vec<u8>)> {
    let grid = inputs.grid()?;
    let t_last = *grid.times.last().expect("grid has dates");
    let k_atm = atm_strike(market, &grid.strikes, t_last);
    let hash = inputs.model_hash();
    match engine {
        Engine::Mc => {
            let (spec, options) = inputs.mc()?;
            let cal = calibrate_mc(market, model, &grid, &spec, &options)?;
            let mut meta = GridMetadata::for_grid(&cal.grid, hash);
            meta.provenance.insert("engine".into(), json!("mc"));
            meta.provenance.insert("sim_spec".into(), json!(spec));
            meta.provenance.insert("options".into(), json!(options));
            let rows = mc_convergence(&model.with_local_vol(cal.grid.clone()), &spec, t_last, k_atm)?;
            Ok((cal, meta, convergence_csv(engine, &rows)))
        }
        Engine::Pde => {
            let mut spec = inputs.pde()?;
            spec.min_density_ratio = inputs.config.grid.min_density_ratio;
            let run = calibrate_pde(market, model, &grid, &spec)?;
            let mut meta = GridMetadata::for_grid(&run.calibration.grid, hash);
            meta.provenance.insert("engine".into(), json!("pde"));
            meta.provenance.insert("pde_spec".into(), json!(spec));
            meta.provenance.insert("pde_stats".into(), json!(run.stats));
            let rows = pde_convergence(&model.with_local_vol(run.calibration.grid.clone()), &spec, t_last, k_atm)?;
            Ok((run.calibration, meta, convergence_csv(engine, &rows)))
        }
    }
}

/// Local volatility under stochastic rates with the selected engine.
pub fn calibrate(inputs: &Inputs, engine: Engine, out_dir: &Path) -> Result<Manifest> {
    let market = inputs.market()?;
    let model = inputs.model(&market)?;
    let (cal, meta, convergence) = calibrate_with(inputs, engine, &market, &model)?;
    let mut out = RunOutput::create(out_dir)?;
    write_calibration(&mut out, &cal, &meta)?;
    out.write(CONVERGENCE, &convergence)?;
    out.finish(inputs, "calibrate", Some(engine))
}

/// Black volatility implied by the undiscounted OTM option on `samples`,
/// with exact forward parity for strikes below the forward.
fn sample_implied_vol(market: &CallPriceSurface, samples: &SampleSet, strike: f64, t: f64) -> Option<f64> {
    let forward = market.forward(t);
    let undiscounted = if strike >= forward {
        samples.estimate(|s| (s.spot - strike).max(0.0)).0
    } else {
        samples.estimate(|s| (strike - s.spot).max(0.0)).0 + forward - strike
    };
    let r_d = market.domestic().zero_rate(t);
    let r_f = market.foreign().zero_rate(t);
    implied_vol(market.discount(t) * undiscounted, market.spot(), strike, r_d, r_f, t).ok()
}

/// Leverage function of the local/stochastic hybrid.
pub fn hybrid(inputs: &Inputs, engine: Option<Engine>, out_dir: &Path) -> Result<Manifest> {
    let hc = inputs.hybrid()?;
    let market = inputs.market()?;
    let base = inputs.model(&market)?;
    let grid = inputs.grid()?;
    let mut out = RunOutput::create(out_dir)?;

    let (loc1, used_engine) = match inputs.loc1()? {
        Some((grid, _)) => (grid, None),
        None => {
            let engine = inputs
                .engine(engine)
                .map_err(|_| config("hybrid needs [hybrid].loc1 or an engine to calibrate it inline"))?;
            let (cal, meta, _) = calibrate_with(inputs, engine, &market, &base)?;
            write_grid(&mut out, LOC1_GRID, &cal.grid, &meta)?;
            (cal.grid, Some(engine))
        }
    };

    let model = HybridModel::new(base.with_local_vol(loc1.clone()), hc.sz, hc.gamma, hc.rho_f_nu)
        .map_err(|e| config(format!("[hybrid]: {e}")))?;
    let times = hc.times.clone().unwrap_or_else(|| grid.times.clone());
    let spec = SimSpec {
        n_paths: hc.n_paths,
        steps_per_year: hc.steps_per_year,
        seed: sub_seed(inputs.seed, HYBRID_STREAM),
        scheme: Default::default(),
        antithetic: hc.antithetic,
    };
    spec.validate().map_err(|e| config(format!("[hybrid]: {e}")))?;
    let cal = calibrate_hybrid_loc2(&loc1, &model, &times, &grid.strikes, &spec, &hc.options())?;

    let mut meta = GridMetadata::for_grid(&cal.grid, inputs.model_hash());
    meta.provenance.insert("engine".into(), json!("hybrid"));
    meta.provenance.insert("sim_spec".into(), json!(spec));
    meta.provenance.insert("sz".into(), json!(hc.sz));
    meta.provenance.insert("gamma".into(), json!(hc.gamma));
    write_grid(&mut out, LOC2_GRID, &cal.grid, &meta)?;
    let mut diag = Vec::new();
    io::write_hybrid_diagnostics_csv(&mut diag, &cal.columns)?;
    out.write(HYBRID_DIAGNOSTICS, &diag)?;

    let local = base.with_local_vol(loc1);
    let calibrated = model.with_local_vol(cal.grid.clone());
    let mut rep = String::from("T,K,vol_local,vol_hybrid,diff_bp\n");
    for (i, &t) in times.iter().filter(|&&t| t > 0.0).enumerate() {
        let rs = SimSpec {
            n_paths: hc.reprice_paths,
            seed: sub_seed(inputs.seed, REPRICE_STREAM + i as u64),
            ..spec.clone()
        };
        let a = simulate_tforward(&local, t, &rs)?;
        let b = simulate_hybrid_tforward(&calibrated, t, &rs)?;
        for &k in &grid.strikes {
            let (Some(va), Some(vb)) = (sample_implied_vol(&market, &a, k, t), sample_implied_vol(&market, &b, k, t))
            else {
                continue;
            };
            let _ = writeln!(rep, "{t},{k},{va},{vb},{}", 1e4 * (vb - va));
        }
    }
    out.write(REPRICING, rep.as_bytes())?;
    out.finish(inputs, "hybrid", used_engine)
}
