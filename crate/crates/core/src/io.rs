//! CSV and JSON readers and writers for curves, surfaces, grids and
//! diagnostics.
//!
//! Numbers are written in Rust's shortest round-trip form, so a grid read
//! back from its CSV is bit-identical to the one written.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::NodeDiagnostic;
use crate::error::{Error, Result};
use crate::hybrid::HybridColumn;
use crate::localvol::{LocalVolGrid, TimeInterp};
use crate::pde::DensityGrid3;
use crate::rates::YieldCurve;
use crate::surfaces::ImpliedVolSurface;

fn parse_error(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

/// Reads a headed CSV whose columns must be exactly `columns`, returning
/// `(line, values)` per record.
fn read_table<R: Read>(reader: R, source: &str, columns: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(source, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != columns {
        return Err(parse_error(
            source,
            1,
            format!("expected header `{}`, found `{}`", columns.join(","), header.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(source, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != columns.len() {
            return Err(parse_error(
                source,
                line,
                format!("expected {} fields, found {}", columns.len(), record.len()),
            ));
        }
        let values = record
            .iter()
            .zip(columns)
            .map(|(field, name)| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_error(source, line, format!("{name}: `{field}` is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, values));
    }
    if rows.is_empty() {
        return Err(parse_error(source, 1, "no data rows"));
    }
    Ok(rows)
}

fn source_name(path: &Path) -> String {
    path.display().to_string()
}

/// Parses a zero curve with header `tenor_years,zero_rate`.
pub fn parse_curve_csv<R: Read>(reader: R, source: &str) -> Result<YieldCurve> {
    let rows = read_table(reader, source, &["tenor_years", "zero_rate"])?;
    for pair in rows.windows(2) {
        if pair[1].1[0] <= pair[0].1[0] {
            return Err(parse_error(source, pair[1].0, "tenors must be strictly increasing"));
        }
    }
    YieldCurve::new(rows.iter().map(|r| r.1[0]).collect(), rows.iter().map(|r| r.1[1]).collect())
}

pub fn read_curve_csv(path: &Path) -> Result<YieldCurve> {
    parse_curve_csv(std::fs::File::open(path)?, &source_name(path))
}

/// Parses implied-vol quotes with header `strike,maturity_years,implied_vol`
/// into a full strike x maturity grid.
pub fn parse_surface_csv<R: Read>(reader: R, source: &str, spot: f64) -> Result<ImpliedVolSurface> {
    let rows = read_table(reader, source, &["strike", "maturity_years", "implied_vol"])?;
    for (line, v) in &rows {
        if !(v[0] > 0.0 && v[1] > 0.0 && v[2] > 0.0) {
            return Err(parse_error(source, *line, "strike, maturity and vol must be positive"));
        }
    }
    let quotes: Vec<(f64, f64, f64)> = rows.iter().map(|(_, v)| (v[0], v[1], v[2])).collect();
    ImpliedVolSurface::from_rows(spot, &quotes)
}

pub fn read_surface_csv(path: &Path, spot: f64) -> Result<ImpliedVolSurface> {
    parse_surface_csv(std::fs::File::open(path)?, &source_name(path), spot)
}

/// Writes quotes in the format read by [`parse_surface_csv`].
pub fn write_surface_csv<W: Write>(writer: W, surface: &ImpliedVolSurface) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strike", "maturity_years", "implied_vol"])?;
    for (i, t) in surface.maturities().iter().enumerate() {
        for (j, k) in surface.strikes().iter().enumerate() {
            w.write_record([k.to_string(), t.to_string(), surface.quotes()[i][j].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a grid as `time,spot,sigma`, time-major.
pub fn write_grid_csv<W: Write>(writer: W, grid: &LocalVolGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "spot", "sigma"])?;
    let n = grid.spot_nodes().len();
    for (i, t) in grid.time_nodes().iter().enumerate() {
        for (j, s) in grid.spot_nodes().iter().enumerate() {
            w.write_record([t.to_string(), s.to_string(), grid.values()[i * n + j].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `time,spot,sigma` grid. Rows may come in any order but must
/// cover the full time x spot product exactly once.
pub fn parse_grid_csv<R: Read>(reader: R, source: &str, time_interp: TimeInterp) -> Result<LocalVolGrid> {
    let rows = read_table(reader, source, &["time", "spot", "sigma"])?;
    let mut times: Vec<f64> = rows.iter().map(|r| r.1[0]).collect();
    let mut spots: Vec<f64> = rows.iter().map(|r| r.1[1]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    spots.sort_by(f64::total_cmp);
    spots.dedup();
    let n = spots.len();
    let mut values = vec![f64::NAN; times.len() * n];
    for (line, v) in &rows {
        let i = times.partition_point(|t| *t < v[0]);
        let j = spots.partition_point(|s| *s < v[1]);
        let slot = &mut values[i * n + j];
        if !slot.is_nan() {
            return Err(parse_error(source, *line, format!("duplicate node t={}, S={}", v[0], v[1])));
        }
        *slot = v[2];
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(parse_error(source, rows.len() + 1, "rows do not form a complete time x spot grid"));
    }
    Ok(LocalVolGrid::new(times, spots, values)?.with_time_interp(time_interp))
}

pub fn read_grid_csv(path: &Path, time_interp: TimeInterp) -> Result<LocalVolGrid> {
    parse_grid_csv(std::fs::File::open(path)?, &source_name(path), time_interp)
}

/// JSON companion of a grid CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub time_nodes: Vec<f64>,
    pub spot_nodes: Vec<f64>,
    pub time_interp: TimeInterp,
    /// Hex digest identifying the model and inputs that produced the grid.
    pub model_hash: String,
    /// Free-form provenance: engine, seed, source files, parameters.
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl GridMetadata {
    pub fn for_grid(grid: &LocalVolGrid, model_hash: impl Into<String>) -> Self {
        Self {
            time_nodes: grid.time_nodes().to_vec(),
            spot_nodes: grid.spot_nodes().to_vec(),
            time_interp: grid.time_interp(),
            model_hash: model_hash.into(),
            provenance: BTreeMap::new(),
        }
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_grid_files(dir: &Path, stem: &str, grid: &LocalVolGrid, meta: &GridMetadata) -> Result<()> {
    write_grid_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?, grid)?;
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Reads a grid written by [`write_grid_files`], checking the CSV against
/// its metadata.
pub fn read_grid_files(dir: &Path, stem: &str) -> Result<(LocalVolGrid, GridMetadata)> {
    let meta_path = dir.join(format!("{stem}.json"));
    let meta: GridMetadata = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let grid = read_grid_csv(&dir.join(format!("{stem}.csv")), meta.time_interp)?;
    if grid.time_nodes() != meta.time_nodes.as_slice() || grid.spot_nodes() != meta.spot_nodes.as_slice() {
        return Err(Error::InvalidInput(format!(
            "{} does not match the nodes of its grid file",
            meta_path.display()
        )));
    }
    Ok((grid, meta))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Per-node diagnostics as `T,K,exp_term,se,d2C_dK2,sigma,status`. The
/// standard error is empty for PDE and deterministic terms.
pub fn write_diagnostics_csv<W: Write>(writer: W, rows: &[NodeDiagnostic]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["T", "K", "exp_term", "se", "d2C_dK2", "sigma", "status"])?;
    for d in rows {
        let status = serde_json::to_value(d.status)?;
        w.write_record([
            d.maturity.to_string(),
            d.strike.to_string(),
            d.exp_term.to_string(),
            opt(d.std_error),
            d.d2c_dk2.to_string(),
            d.sigma.to_string(),
            status.as_str().unwrap_or_default().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Conditional expectations of a leverage calibration as
/// `T,K,e_gamma2,se,count,bandwidth`.
pub fn write_hybrid_diagnostics_csv<W: Write>(writer: W, columns: &[HybridColumn]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["T", "K", "e_gamma2", "se", "count", "bandwidth"])?;
    for col in columns {
        for n in &col.nodes {
            w.write_record([
                col.time.to_string(),
                n.strike.to_string(),
                n.value.to_string(),
                opt(n.std_error),
                n.count.to_string(),
                n.bandwidth.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Density snapshot as `x,y,z,phi` with `x = ln S` and `y`, `z` the
/// domestic and foreign short rates.
pub fn write_density_csv<W: Write>(writer: W, density: &DensityGrid3) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y", "z", "phi"])?;
    let ax = density.mesh.axes();
    let (ny, nz) = (ax[1].len, ax[2].len);
    for i in 0..ax[0].len {
        for j in 0..ny {
            for l in 0..nz {
                w.write_record([
                    ax[0].coord(i).to_string(),
                    (ax[1].coord(j) + density.offset_d).to_string(),
                    (ax[2].coord(l) + density.offset_f).to_string(),
                    density.values[(i * ny + j) * nz + l].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_round_trip_and_line_numbers() {
        let text = "tenor_years,zero_rate\n0.5,0.02\n1,0.025\n5,0.03\n";
        let c = parse_curve_csv(text.as_bytes(), "curve").unwrap();
        assert_eq!(c.pillar_times(), &[0.5, 1.0, 5.0]);
        let bad = "tenor_years,zero_rate\n0.5,0.02\n1,abc\n";
        match parse_curve_csv(bad.as_bytes(), "curve") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("zero_rate"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let unordered = "tenor_years,zero_rate\n1,0.02\n0.5,0.02\n";
        assert!(matches!(
            parse_curve_csv(unordered.as_bytes(), "curve"),
            Err(Error::Parse { line: 3, .. })
        ));
        let header = "tenor,zero_rate\n1,0.02\n";
        assert!(matches!(parse_curve_csv(header.as_bytes(), "curve"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ragged_rows_are_reported() {
        let text = "strike,maturity_years,implied_vol\n1,1,0.2\n1.1,1\n";
        assert!(matches!(
            parse_surface_csv(text.as_bytes(), "surf", 1.0),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn surface_rows_build_the_grid() {
        let text = "strike,maturity_years,implied_vol\n0.9,1,0.21\n1.1,1,0.19\n0.9,2,0.22\n1.1,2,0.2\n";
        let s = parse_surface_csv(text.as_bytes(), "surf", 1.0).unwrap();
        assert_eq!(s.strikes(), &[0.9, 1.1]);
        assert_eq!(s.quotes()[1], vec![0.22, 0.2]);
        let mut out = Vec::new();
        write_surface_csv(&mut out, &s).unwrap();
        let back = parse_surface_csv(out.as_slice(), "out", 1.0).unwrap();
        assert_eq!(back.quotes(), s.quotes());
    }

    #[test]
    fn grid_round_trip_is_bit_exact() {
        let g = LocalVolGrid::from_fn(vec![0.0, 0.25, 1.0 / 3.0], vec![0.8, 1.0, 1.2], |t, s| 0.1 + t / 7.0 + s.ln().abs())
            .unwrap()
            .with_time_interp(TimeInterp::PiecewiseConstant);
        let dir = tempfile::tempdir().unwrap();
        let mut meta = GridMetadata::for_grid(&g, "abc");
        meta.provenance.insert("engine".into(), "mc".into());
        write_grid_files(dir.path(), "loc", &g, &meta).unwrap();
        let (back, m) = read_grid_files(dir.path(), "loc").unwrap();
        assert_eq!(back, g);
        assert_eq!(m, meta);
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let text = "time,spot,sigma\n0,1,0.2\n0,1.1,0.2\n1,1,0.2\n";
        assert!(matches!(
            parse_grid_csv(text.as_bytes(), "grid", TimeInterp::Linear),
            Err(Error::Parse { .. })
        ));
        let dup = "time,spot,sigma\n0,1,0.2\n0,1,0.3\n";
        assert!(matches!(
            parse_grid_csv(dup.as_bytes(), "grid", TimeInterp::Linear),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
