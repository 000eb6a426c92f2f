//! Types and column evaluation shared by the Monte Carlo and PDE
//! bootstrap calibrations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::localvol::{variance_to_vol, ExpectationTerm};
use crate::math::check_increasing;
use crate::surfaces::CallPriceSurface;

/// Calibration dates and strikes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub times: Vec<f64>,
    pub strikes: Vec<f64>,
}

impl CalibrationGrid {
    pub fn new(times: Vec<f64>, strikes: Vec<f64>) -> Result<Self> {
        check_increasing("calibration times", &times)?;
        check_increasing("calibration strikes", &strikes)?;
        if times[0] <= 0.0 || strikes[0] <= 0.0 {
            return Err(invalid("calibration times and strikes must be positive"));
        }
        Ok(Self { times, strikes })
    }
}

/// Outcome at one calibration node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Ok,
    /// `d2C/dK2` below the convexity floor.
    DegenerateConvexity,
    /// Too little probability mass or too few samples around the strike.
    Unsupported,
    /// Local variance below the rounding tolerance.
    NegativeVariance,
}

/// Per-node diagnostic row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostic {
    pub maturity: f64,
    pub strike: f64,
    pub exp_term: f64,
    pub std_error: Option<f64>,
    pub d2c_dk2: f64,
    pub sigma: f64,
    pub status: NodeStatus,
}

/// Calibrated grid with its diagnostics.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub grid: crate::localvol::LocalVolGrid,
    pub diagnostics: Vec<NodeDiagnostic>,
}

impl Calibration {
    pub fn flagged(&self) -> impl Iterator<Item = &NodeDiagnostic> {
        self.diagnostics.iter().filter(|d| d.status != NodeStatus::Ok)
    }
}

/// Node input for one column: the expectation term (or `None` for the
/// deterministic first column) and whether the estimator supports it.
pub(crate) struct NodeInput {
    pub term: Option<ExpectationTerm>,
    pub supported: bool,
}

/// Evaluates the local-vol formula for one time column and fills flagged
/// nodes from their nearest valid neighbour in strike.
pub(crate) fn evaluate_column(
    surface: &CallPriceSurface,
    t: f64,
    strikes: &[f64],
    inputs: &[NodeInput],
) -> Result<(Vec<f64>, Vec<NodeDiagnostic>)> {
    let floor = surface.convexity_floor();
    let pd = surface.discount(t);
    let fd = surface.domestic().forward_unchecked(t);
    let ff = surface.foreign().forward_unchecked(t);
    let mut sig = vec![f64::NAN; strikes.len()];
    let mut diags = Vec::with_capacity(strikes.len());
    for (j, (&k, input)) in strikes.iter().zip(inputs).enumerate() {
        let p = surface.partials(k, t)?;
        let (exp_term, se) = match &input.term {
            Some(term) => (term.value, term.std_error),
            None => {
                let q = -p.d_dk / pd;
                (fd * k * q - ff * (p.value / pd + k * q), None)
            }
        };
        let mut status = NodeStatus::Ok;
        if p.d2_dk2 < floor {
            status = NodeStatus::DegenerateConvexity;
        } else if !input.supported {
            status = NodeStatus::Unsupported;
        } else {
            let var = (p.d_dt - pd * exp_term) / (0.5 * k * k * p.d2_dk2);
            match variance_to_vol(var, k, t) {
                Ok(v) => sig[j] = v,
                Err(Error::NegativeVariance { .. }) => status = NodeStatus::NegativeVariance,
                Err(e) => return Err(e),
            }
        }
        diags.push(NodeDiagnostic {
            maturity: t,
            strike: k,
            exp_term,
            std_error: se,
            d2c_dk2: p.d2_dk2,
            sigma: sig[j],
            status,
        });
    }
    fill_nearest(&mut sig, strikes).ok_or_else(|| {
        Error::Numeric(format!("no valid local-vol node in the column at T={t}"))
    })?;
    for (d, s) in diags.iter_mut().zip(&sig) {
        d.sigma = *s;
    }
    Ok((sig, diags))
}

/// One-factor (deterministic-rate) Dupire local vol on every node of
/// `grid`. Nodes with too little market density (below `min_density_ratio`
/// of the density at the forward) are flagged and filled.
pub fn calibrate_dupire(surface: &CallPriceSurface, grid: &CalibrationGrid, min_density_ratio: f64) -> Result<Calibration> {
    let mut values = Vec::with_capacity(grid.times.len() * grid.strikes.len());
    let mut diagnostics = Vec::with_capacity(values.capacity());
    for &t in &grid.times {
        let inputs: Vec<NodeInput> = crate::mc::market_support(surface, t, &grid.strikes, min_density_ratio)?
            .into_iter()
            .map(|supported| NodeInput { term: None, supported })
            .collect();
        let (col, diag) = evaluate_column(surface, t, &grid.strikes, &inputs)?;
        values.extend(col);
        diagnostics.extend(diag);
    }
    let grid = crate::localvol::LocalVolGrid::new(grid.times.clone(), grid.strikes.clone(), values)?;
    Ok(Calibration { grid, diagnostics })
}

/// Replaces NaN entries by the value at the nearest non-NaN strike.
pub(crate) fn fill_nearest(values: &mut [f64], strikes: &[f64]) -> Option<()> {
    let valid: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    if valid.is_empty() {
        return None;
    }
    for i in 0..values.len() {
        if values[i].is_nan() {
            let src = *valid
                .iter()
                .min_by(|&&a, &&b| {
                    (strikes[a] - strikes[i])
                        .abs()
                        .total_cmp(&(strikes[b] - strikes[i]).abs())
                })
                .unwrap();
            values[i] = values[src];
        }
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_fill_prefers_closest_strike() {
        let mut v = vec![f64::NAN, 0.2, f64::NAN, f64::NAN, 0.3];
        fill_nearest(&mut v, &[0.8, 0.9, 1.0, 1.15, 1.2]).unwrap();
        assert_eq!(v, vec![0.2, 0.2, 0.2, 0.3, 0.3]);
        let mut none = vec![f64::NAN; 2];
        assert!(fill_nearest(&mut none, &[1.0, 2.0]).is_none());
    }

    #[test]
    fn dupire_grid_of_a_flat_smile_is_flat() {
        let surface = CallPriceSurface::from_implied(
            crate::surfaces::ImpliedVolSurface::flat(1.0, 0.2).unwrap(),
            crate::rates::YieldCurve::flat(0.03),
            crate::rates::YieldCurve::flat(0.01),
        );
        let grid = CalibrationGrid::new(vec![0.5, 1.0, 2.0], vec![0.8, 1.0, 1.25]).unwrap();
        let c = calibrate_dupire(&surface, &grid, 1e-4).unwrap();
        assert!(c.grid.values().iter().all(|v| (v - 0.2).abs() < 1e-6));
        assert_eq!(c.flagged().count(), 0);
    }

    #[test]
    fn grid_validation() {
        assert!(CalibrationGrid::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(CalibrationGrid::new(vec![1.0, 0.5], vec![1.0]).is_err());
        assert!(CalibrationGrid::new(vec![0.5, 1.0], vec![0.9, 1.1]).is_ok());
    }
}
