//! The joint forward density of `(ln S, x_d, x_f)` and the quantities the
//! calibration reads from it.

use crate::error::{domain, Result};
use crate::localvol::{ExpectationSource, ExpectationTerm};
use crate::pde::adi::Mesh;

/// Density of `(u, y, z) = (ln S, x_d, x_f)` at time `t` under the
/// domestic `t`-forward measure. The short rates are `r_d = y + offset_d`
/// and `r_f = z + offset_f`.
#[derive(Debug, Clone)]
pub struct DensityGrid3 {
    pub mesh: Mesh,
    pub values: Vec<f64>,
    pub time: f64,
    pub offset_d: f64,
    pub offset_f: f64,
}

/// Marginals of the density in log-spot coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDensity {
    /// Log-spot nodes.
    pub u: Vec<f64>,
    /// Foreign-rate nodes (`r_f`).
    pub r_f: Vec<f64>,
    /// `q(u, r_f)`, row-major `[u][z]`.
    pub q: Vec<f64>,
    /// `p(u)`.
    pub p: Vec<f64>,
}

impl ReducedDensity {
    /// Density of the spot itself, `p(ln S) / S`.
    pub fn spot_density(&self) -> Vec<(f64, f64)> {
        self.u.iter().zip(&self.p).map(|(u, p)| (u.exp(), p / u.exp())).collect()
    }
}

impl DensityGrid3 {
    pub fn mass(&self) -> f64 {
        crate::math::pairwise_sum(&self.values) * self.mesh.cell_volume()
    }

    fn dims(&self) -> (usize, usize, usize) {
        let ax = self.mesh.axes();
        (ax[0].len, ax[1].len, ax[2].len)
    }

    /// Marginals by trapezoidal integration over `y`, then `z`.
    pub fn reduce(&self) -> ReducedDensity {
        let (nu, ny, nz) = self.dims();
        let ax = self.mesh.axes();
        let mut q = vec![0.0; nu * nz];
        for i in 0..nu {
            for j in 0..ny {
                let wj = if j == 0 || j + 1 == ny { 0.5 } else { 1.0 };
                let base = (i * ny + j) * nz;
                for l in 0..nz {
                    q[i * nz + l] += wj * self.values[base + l] * ax[1].step;
                }
            }
        }
        let p = (0..nu)
            .map(|i| {
                (0..nz)
                    .map(|l| {
                        let wl = if l == 0 || l + 1 == nz { 0.5 } else { 1.0 };
                        wl * q[i * nz + l] * ax[2].step
                    })
                    .sum()
            })
            .collect();
        ReducedDensity {
            u: ax[0].coords(),
            r_f: ax[2].coords().iter().map(|z| z + self.offset_f).collect(),
            q,
            p,
        }
    }

    /// Per log-spot node: `(p(u), int r_d psi dy dz, int r_f psi dy dz)`.
    pub(crate) fn rate_moments(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (nu, ny, nz) = self.dims();
        let ax = self.mesh.axes();
        let area = ax[1].step * ax[2].step;
        let ys: Vec<f64> = ax[1].coords().iter().map(|y| y + self.offset_d).collect();
        let zs: Vec<f64> = ax[2].coords().iter().map(|z| z + self.offset_f).collect();
        let mut m0 = vec![0.0; nu];
        let mut my = vec![0.0; nu];
        let mut mz = vec![0.0; nu];
        for i in 0..nu {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for (j, y) in ys.iter().enumerate() {
                let base = (i * ny + j) * nz;
                for (l, z) in zs.iter().enumerate() {
                    let v = self.values[base + l];
                    a += v;
                    b += y * v;
                    c += z * v;
                }
            }
            m0[i] = a * area;
            my[i] = b * area;
            mz[i] = c * area;
        }
        (m0, my, mz)
    }

    /// Normalised expectation of `g(u, r_d, r_f)`.
    pub fn expectation(&self, g: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let (nu, ny, nz) = self.dims();
        let ax = self.mesh.axes();
        let mut acc = 0.0;
        let mut mass = 0.0;
        for i in 0..nu {
            let u = ax[0].coord(i);
            for j in 0..ny {
                let y = ax[1].coord(j) + self.offset_d;
                for l in 0..nz {
                    let v = self.values[(i * ny + j) * nz + l];
                    acc += g(u, y, ax[2].coord(l) + self.offset_f) * v;
                    mass += v;
                }
            }
        }
        acc / mass
    }

    pub fn mean_spot(&self) -> f64 {
        self.expectation(|u, _, _| u.exp())
    }

    pub fn mean_rd(&self) -> f64 {
        self.expectation(|_, rd, _| rd)
    }

    pub fn mean_rf(&self) -> f64 {
        self.expectation(|_, _, rf| rf)
    }

    /// Undiscounted call `E^{Q_t}[(S - K)^+]`. The payoff is integrated
    /// exactly against the piecewise-linear log-spot marginal, minus the
    /// `h^2/12` interpolation bias, so the price is smooth in the strike.
    pub fn forward_call(&self, strike: f64) -> Result<f64> {
        if !(strike > 0.0) {
            return Err(domain(format!("strike must be positive, got {strike}")));
        }
        let (m0, _, _) = self.rate_moments();
        let u = self.mesh.axes()[0].coords();
        let h = u[1] - u[0];
        let mass = m0.iter().sum::<f64>() * h;
        let x0 = strike.ln();
        let mut acc = 0.0;
        let mut above = 0.0;
        for i in 0..u.len() - 1 {
            let (a, b) = (u[i], u[i + 1]);
            if b <= x0 {
                continue;
            }
            let l = a.max(x0);
            let slope = (m0[i + 1] - m0[i]) / h;
            let c = m0[i] - slope * a;
            let lin = c * (b - l) + 0.5 * slope * (b * b - l * l);
            let exp = b.exp() * (c + slope * (b - 1.0)) - l.exp() * (c + slope * (l - 1.0));
            acc += exp - strike * lin;
            above += exp;
        }
        let at_strike = if x0 <= u[0] || x0 >= u[u.len() - 1] {
            0.0
        } else {
            let i = crate::math::bracket(&u, x0);
            m0[i] + (x0 - u[i]) / h * (m0[i + 1] - m0[i])
        };
        // Leading interpolation error of the piecewise-linear density.
        acc -= h * h / 12.0 * (above + strike * at_strike);
        Ok(acc / mass)
    }

    /// Smallest value relative to the largest one.
    pub fn min_relative(&self) -> f64 {
        let max = self.values.iter().fold(0.0f64, |m, v| m.max(*v));
        let min = self.values.iter().fold(0.0f64, |m, v| m.min(*v));
        if max > 0.0 {
            min / max
        } else {
            0.0
        }
    }
}

/// Integrates the piecewise-linear interpolant of `g` over `[x0, +inf)`
/// on the uniform nodes `u`.
pub(crate) fn integrate_above(u: &[f64], g: &[f64], x0: f64) -> f64 {
    let n = u.len();
    let h = u[1] - u[0];
    if x0 <= u[0] {
        return (0..n - 1).map(|i| 0.5 * h * (g[i] + g[i + 1])).sum();
    }
    if x0 >= u[n - 1] {
        return 0.0;
    }
    let i = (((x0 - u[0]) / h).floor() as usize).min(n - 2);
    let w = (x0 - u[i]) / h;
    let g0 = g[i] + w * (g[i + 1] - g[i]);
    let mut acc = 0.5 * (u[i + 1] - x0) * (g0 + g[i + 1]);
    for j in i + 1..n - 1 {
        acc += 0.5 * h * (g[j] + g[j + 1]);
    }
    acc
}

/// Precomputed rate moments for evaluating the expectation term at many
/// strikes.
pub(crate) struct ExpectationKernel {
    u: Vec<f64>,
    m0: Vec<f64>,
    ms: Vec<f64>,
    my: Vec<f64>,
    mz: Vec<f64>,
    mass: f64,
    time: f64,
}

impl ExpectationKernel {
    pub fn new(density: &DensityGrid3) -> Self {
        let (m0, my, mz) = density.rate_moments();
        let u = density.mesh.axes()[0].coords();
        let h = u[1] - u[0];
        let mass = m0.iter().sum::<f64>() * h;
        let mz = mz.iter().zip(&u).map(|(m, x)| m * x.exp()).collect();
        let ms = m0.iter().zip(&u).map(|(m, x)| m * x.exp()).collect();
        Self {
            u,
            m0,
            ms,
            my,
            mz,
            mass,
            time: density.time,
        }
    }

    pub fn term(&self, strike: f64) -> Result<ExpectationTerm> {
        if !(strike > 0.0) {
            return Err(domain(format!("strike must be positive, got {strike}")));
        }
        let x0 = strike.ln();
        let g: Vec<f64> = self.my.iter().zip(&self.mz).map(|(y, z)| strike * y - z).collect();
        Ok(ExpectationTerm {
            strike,
            maturity: self.time,
            value: integrate_above(&self.u, &g, x0) / self.mass,
            std_error: None,
            source: ExpectationSource::Pde,
        })
    }

    /// `E[((r_d - f_d) K - (r_f - f_f) S) 1{S > K}]`: the part of the
    /// expectation term caused by stochastic rates.
    pub fn rate_deviation(&self, strike: f64, f_d: f64, f_f: f64) -> f64 {
        let g: Vec<f64> = (0..self.u.len())
            .map(|i| strike * (self.my[i] - f_d * self.m0[i]) - (self.mz[i] - f_f * self.ms[i]))
            .collect();
        integrate_above(&self.u, &g, strike.ln()) / self.mass
    }
}

/// `E^{Q_t}[(r_d K - r_f S) 1{S > K}]` by quadrature against the density,
/// with a partial-cell treatment of the indicator.
pub fn expectation_term_pde(density: &DensityGrid3, strike: f64) -> Result<ExpectationTerm> {
    ExpectationKernel::new(density).term(strike)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::adi::Axis;

    fn gaussian_density() -> DensityGrid3 {
        let mesh = Mesh::new(vec![
            Axis::uniform(-1.0, 1.0, 81).unwrap(),
            Axis::uniform(-0.05, 0.05, 41).unwrap(),
            Axis::uniform(-0.05, 0.05, 41).unwrap(),
        ])
        .unwrap();
        let mut values = mesh.map_nodes(|x| {
            (-0.5 * (x[0] / 0.2).powi(2) - 0.5 * (x[1] / 0.01).powi(2) - 0.5 * ((x[2] - 0.002) / 0.008).powi(2)).exp()
        });
        for (idx, v) in values.iter_mut().enumerate() {
            if !mesh.is_interior(idx) {
                *v = 0.0;
            }
        }
        let vol = mesh.cell_volume();
        let s: f64 = values.iter().sum::<f64>() * vol;
        values.iter_mut().for_each(|v| *v /= s);
        DensityGrid3 {
            mesh,
            values,
            time: 1.0,
            offset_d: 0.03,
            offset_f: 0.01,
        }
    }

    #[test]
    fn marginals_are_gaussian_and_conserve_mass() {
        let d = gaussian_density();
        let r = d.reduce();
        let h = r.u[1] - r.u[0];
        let total: f64 = r.p.iter().sum::<f64>() * h;
        assert!((total - d.mass()).abs() < 1e-12);
        for (u, p) in r.u.iter().zip(&r.p) {
            let exact = (-0.5 * (u / 0.2).powi(2)).exp() / (0.2 * (2.0 * std::f64::consts::PI).sqrt());
            assert!((p - exact).abs() < 1e-5, "u={u}: {p} vs {exact}");
        }
        assert!((d.mean_rd() - 0.03).abs() < 1e-12);
        assert!((d.mean_rf() - 0.012).abs() < 1e-9);
    }

    #[test]
    fn expectation_below_mesh_is_unconditional() {
        let d = gaussian_density();
        let k = 0.2;
        let e = expectation_term_pde(&d, k).unwrap().value;
        let rd = d.mean_rd();
        let rfs = d.expectation(|u, _, rf| rf * u.exp());
        assert!((e - (k * rd - rfs)).abs() < 1e-12);
        assert_eq!(expectation_term_pde(&d, 5.0).unwrap().value, 0.0);
        assert!(expectation_term_pde(&d, -1.0).is_err());
    }

    #[test]
    fn forward_call_matches_the_lognormal_price() {
        let d = gaussian_density();
        let s = 0.2;
        for k in [0.7, 0.85, 0.93, 1.0, 1.07, 1.3] {
            let d1 = (-f64::ln(k) + s * s) / s;
            let exact = (0.5 * s * s).exp() * crate::math::norm_cdf(d1) - k * crate::math::norm_cdf(d1 - s);
            let c = d.forward_call(k).unwrap();
            assert!((c - exact).abs() < 2e-5, "K={k}: {c} vs {exact}");
        }
        assert!(d.forward_call(0.0).is_err());
    }

    #[test]
    fn partial_cell_integration_is_exact_for_linear_data() {
        let u: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let g: Vec<f64> = u.iter().map(|x| 2.0 * x + 1.0).collect();
        let exact = |a: f64| (1.0 + 1.0) - (a * a + a);
        for &a in &[0.0, 0.05, 0.37, 0.99] {
            assert!((integrate_above(&u, &g, a) - exact(a)).abs() < 1e-14);
        }
    }
}
