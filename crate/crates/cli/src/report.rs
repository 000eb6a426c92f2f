//! Invariant checks and plot-ready CSV for a finished run directory.

use std::fmt::Write as _;
use std::path::Path;

use fxlv_core::io::{self, GridMetadata};
use fxlv_core::{CallPriceSurface, LocalVolGrid, PdeRunStats};

use crate::commands::{CONVERGENCE, DIAGNOSTICS, HYBRID_DIAGNOSTICS, LOC1_GRID, LOC2_GRID, LOC_GRID, REPRICING};
use crate::config::{sha256_hex, Inputs};
use crate::error::{config, CliError, Result};
use crate::manifest::{Manifest, RunOutput, MANIFEST_FILE};

pub const REPORT_DIR: &str = "report";
pub const MAX_MASS_DRIFT: f64 = 5e-3;
/// Largest tolerated undershoot before the limiter, relative to the peak.
pub const MAX_UNDERSHOOT: f64 = 1e-4;
pub const MAX_REPRICING_BP: f64 = 50.0;
/// Repricing is checked for strikes within this many standard deviations
/// of the forward.
pub const REPRICING_BAND: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// Data rows of one of the run's own CSV files, or `None` if absent.
fn read_rows(dir: &Path, name: &str) -> Result<Option<Vec<Vec<String>>>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::Read { path, source })?;
    Ok(Some(
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect(),
    ))
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn grid_checks(dir: &Path, stem: &str, checks: &mut Vec<Check>) -> Option<(LocalVolGrid, GridMetadata)> {
    if !dir.join(format!("{stem}.csv")).exists() {
        return None;
    }
    match io::read_grid_files(dir, stem) {
        Ok((grid, meta)) => {
            let bad = grid.values().iter().filter(|v| !(v.is_finite() && **v > 0.0)).count();
            checks.push(Check::new(
                format!("{stem} finite and positive"),
                bad == 0,
                format!("{} nodes, {bad} invalid", grid.values().len()),
            ));
            Some((grid, meta))
        }
        Err(e) => {
            checks.push(Check::new(format!("{stem} readable"), false, e.to_string()));
            None
        }
    }
}

fn diagnostics_checks(rows: &[Vec<String>], checks: &mut Vec<Check>) {
    let flagged = rows.iter().filter(|r| r.get(6).is_some_and(|s| s != "ok")).count();
    let mut times: Vec<f64> = rows.iter().map(|r| num(&r[0])).collect();
    times.dedup();
    let empty: Vec<f64> = times
        .iter()
        .copied()
        .filter(|&t| !rows.iter().any(|r| num(&r[0]) == t && r[6] == "ok"))
        .collect();
    checks.push(Check::new(
        "every date has a calibrated node",
        empty.is_empty(),
        format!("{} nodes, {flagged} flagged and filled from neighbours", rows.len()),
    ));
    let bad_se = rows.iter().filter(|r| !r[3].is_empty() && !num(&r[3]).is_finite()).count();
    checks.push(Check::new(
        "standard errors finite",
        bad_se == 0,
        format!("{bad_se} non-finite"),
    ));
}

fn pde_checks(meta: &GridMetadata, checks: &mut Vec<Check>) {
    let Some(stats) = meta.provenance.get("pde_stats") else {
        return;
    };
    let Ok(stats) = serde_json::from_value::<PdeRunStats>(stats.clone()) else {
        checks.push(Check::new("PDE statistics readable", false, "malformed pde_stats"));
        return;
    };
    checks.push(Check::new(
        "PDE mass conservation",
        stats.max_mass_error <= MAX_MASS_DRIFT,
        format!("max |mass - 1| {:.3e} (tol {MAX_MASS_DRIFT:e}) over {} steps", stats.max_mass_error, stats.steps),
    ));
    checks.push(Check::new(
        "PDE undershoot before limiter",
        stats.worst_negative >= -MAX_UNDERSHOOT,
        format!(
            "worst {:.3e} of peak (tol {MAX_UNDERSHOOT:e}) over {} node-steps, clipped to zero",
            stats.worst_negative, stats.negative_nodes
        ),
    ));
}

fn repricing_checks(rows: &[Vec<String>], market: &CallPriceSurface, checks: &mut Vec<Check>) {
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for r in rows {
        let (t, k, vol, diff) = (num(&r[0]), num(&r[1]), num(&r[2]), num(&r[4]));
        let z = (k / market.forward(t)).ln() / (vol * t.sqrt());
        if z.abs() <= REPRICING_BAND {
            worst = worst.max(diff.abs());
            used += 1;
        }
    }
    checks.push(Check::new(
        "hybrid repricing",
        used > 0 && worst <= MAX_REPRICING_BP,
        format!("max |diff| {worst:.1} bp over {used} central quotes (tol {MAX_REPRICING_BP} bp)"),
    ));
}

/// Runs every applicable invariant check on `dir` and writes
/// `report/{report.txt, surface.csv, smiles.csv, convergence.csv}`.
/// Returns the checks; failing checks do not stop the report.
pub fn report(dir: &Path) -> Result<Vec<Check>> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(config(format!("{} has no {MANIFEST_FILE}; not a run directory", dir.display())));
    }
    let manifest = Manifest::load(dir)?;
    let inputs = Inputs::load(&dir.join(MANIFEST_FILE), None)?;
    let market = inputs.market()?;
    let mut checks = Vec::new();

    let mut mismatched = Vec::new();
    for (name, digest) in &manifest.outputs {
        match std::fs::read(dir.join(name)) {
            Ok(bytes) if sha256_hex(&bytes) == *digest => {}
            _ => mismatched.push(name.as_str()),
        }
    }
    checks.push(Check::new(
        "output digests",
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} files match the manifest", manifest.outputs.len())
        } else {
            format!("mismatch: {}", mismatched.join(" "))
        },
    ));

    let mut grids = Vec::new();
    for stem in [LOC_GRID, LOC1_GRID, LOC2_GRID] {
        if let Some((grid, meta)) = grid_checks(dir, stem, &mut checks) {
            pde_checks(&meta, &mut checks);
            grids.push((stem, grid));
        }
    }
    if let Some(rows) = read_rows(dir, DIAGNOSTICS)? {
        diagnostics_checks(&rows, &mut checks);
    }
    let convergence = read_rows(dir, CONVERGENCE)?.unwrap_or_default();
    if !convergence.is_empty() {
        let bad = convergence.iter().filter(|r| !num(&r[4]).is_finite()).count();
        checks.push(Check::new(
            "convergence terms finite",
            bad == 0,
            format!("{} levels, {bad} non-finite", convergence.len()),
        ));
    }
    if let Some(rows) = read_rows(dir, HYBRID_DIAGNOSTICS)? {
        let bad = rows.iter().filter(|r| num(&r[2]).is_nan() || num(&r[2]) <= 0.0).count();
        checks.push(Check::new(
            "conditional expectations positive",
            bad == 0,
            format!("{} nodes, {bad} non-positive", rows.len()),
        ));
    }
    if let Some(rows) = read_rows(dir, REPRICING)? {
        repricing_checks(&rows, &market, &mut checks);
    }

    let mut out = RunOutput::create(&dir.join(REPORT_DIR))?;
    let mut surface = String::from("grid,T,S,sigma\n");
    let mut smiles = String::from("grid,T,K,market_vol,local_vol\n");
    for (stem, grid) in &grids {
        let spots = grid.spot_nodes();
        for (i, &t) in grid.time_nodes().iter().enumerate() {
            for (&s, &v) in spots.iter().zip(grid.row(i)) {
                let _ = writeln!(surface, "{stem},{t},{s},{v}");
                if t > 0.0 {
                    let market_vol = market.implied().and_then(|iv| iv.vol(s, t).ok());
                    let mv = market_vol.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(smiles, "{stem},{t},{s},{mv},{v}");
                }
            }
        }
    }
    let mut conv = String::from("engine,resolution,T,K,exp_term,se\n");
    for r in &convergence {
        let _ = writeln!(conv, "{}", r.join(","));
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let mut text = format!(
        "run: {} ({}), seed {}, model {}\n",
        manifest.command,
        manifest.engine.map_or("no engine".to_string(), |e| format!("{e:?}").to_lowercase()),
        manifest.seed.unwrap_or(0),
        manifest.model_hash
    );
    for c in &checks {
        let _ = writeln!(text, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let _ = writeln!(text, "summary: {} passed, {failed} failed", checks.len() - failed);
    out.write("surface.csv", surface.as_bytes())?;
    out.write("smiles.csv", smiles.as_bytes())?;
    out.write("convergence.csv", conv.as_bytes())?;
    out.write("report.txt", text.as_bytes())?;
    Ok(checks)
}
