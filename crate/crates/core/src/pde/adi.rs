//! Douglas ADI time stepping for linear convection-diffusion operators on
//! uniform tensor meshes of any dimension.
//!
//! The operator acting on a density `psi` is
//!
//! ```text
//! L psi = sum_a [ -d_a(mu_a psi) + 1/2 d_aa(D_a psi) ]
//!       + sum_{a<b} d_ab(C_ab psi) - k psi
//! ```
//!
//! discretised with conservative central differences. Mixed derivatives are
//! treated explicitly, each axis implicitly, and the `k` term is folded into
//! the implicit solve of one chosen axis. Boundary nodes are held at zero.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::math::solve_tridiagonal_in_place;

/// Uniform axis `min + i * step`, `i < len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub step: f64,
    pub len: usize,
}

impl Axis {
    pub fn uniform(min: f64, max: f64, len: usize) -> Result<Self> {
        if len < 3 || !(max > min) {
            return Err(invalid(format!("axis needs at least 3 nodes and max > min ({min}, {max}, {len})")));
        }
        Ok(Self {
            min,
            step: (max - min) / (len - 1) as f64,
            len,
        })
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    pub fn max(&self) -> f64 {
        self.coord(self.len - 1)
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.coord(i)).collect()
    }
}

/// Row-major tensor mesh; the last axis varies fastest.
#[derive(Debug, Clone)]
pub struct Mesh {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    size: usize,
    interior: Vec<bool>,
    line_starts: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("mesh needs at least one axis"));
        }
        let d = axes.len();
        let mut strides = vec![1usize; d];
        for a in (0..d - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].len;
        }
        let size = strides[0] * axes[0].len;
        let mut interior = vec![true; size];
        for (idx, flag) in interior.iter_mut().enumerate() {
            for a in 0..d {
                let i = (idx / strides[a]) % axes[a].len;
                if i == 0 || i + 1 == axes[a].len {
                    *flag = false;
                    break;
                }
            }
        }
        let line_starts = (0..d)
            .map(|a| {
                (0..size)
                    .filter(|&idx| {
                        (0..d).all(|b| {
                            let i = (idx / strides[b]) % axes[b].len;
                            if b == a {
                                i == 0
                            } else {
                                i > 0 && i + 1 < axes[b].len
                            }
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            axes,
            strides,
            size,
            interior,
            line_starts,
        })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stride(&self, a: usize) -> usize {
        self.strides[a]
    }

    #[inline]
    pub fn index_along(&self, idx: usize, a: usize) -> usize {
        (idx / self.strides[a]) % self.axes[a].len
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.interior[idx]
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step).product()
    }

    /// Evaluates `f` at every node.
    pub fn map_nodes(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> Vec<f64> {
        let d = self.dim();
        (0..self.size)
            .into_par_iter()
            .map(|idx| {
                let mut x = [0.0f64; 8];
                for a in 0..d {
                    x[a] = self.axes[a].coord(self.index_along(idx, a));
                }
                f(&x[..d])
            })
            .collect()
    }
}

/// Node-wise coefficients of the operator.
#[derive(Debug, Clone)]
pub struct Operator {
    pub drift: Vec<Vec<f64>>,
    pub diffusion: Vec<Vec<f64>>,
    pub mixed: Vec<(usize, usize, Vec<f64>)>,
    pub kill: Option<(usize, Vec<f64>)>,
}

impl Operator {
    pub fn zeros(mesh: &Mesh) -> Self {
        let n = mesh.size();
        let d = mesh.dim();
        Self {
            drift: vec![vec![0.0; n]; d],
            diffusion: vec![vec![0.0; n]; d],
            mixed: Vec::new(),
            kill: None,
        }
    }
}

fn apply_axis(mesh: &Mesh, op: &Operator, a: usize, psi: &[f64], out: &mut [f64]) {
    let s = mesh.stride(a);
    let h = mesh.axes()[a].step;
    let (c1, c2) = (0.5 / h, 0.5 / (h * h));
    let mu = &op.drift[a];
    let dd = &op.diffusion[a];
    let kill = op.kill.as_ref().filter(|(ax, _)| *ax == a).map(|(_, k)| k);
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        if !mesh.interior[idx] {
            *o = 0.0;
            return;
        }
        let (p, m) = (idx + s, idx - s);
        let conv = -(mu[p] * psi[p] - mu[m] * psi[m]) * c1;
        let diff = (dd[p] * psi[p] - 2.0 * dd[idx] * psi[idx] + dd[m] * psi[m]) * c2;
        let k = kill.map_or(0.0, |k| k[idx] * psi[idx]);
        *o = conv + diff - k;
    });
}

fn apply_mixed(mesh: &Mesh, op: &Operator, psi: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (a, b, c) in &op.mixed {
        let (sa, sb) = (mesh.stride(*a), mesh.stride(*b));
        let scale = 0.25 / (mesh.axes()[*a].step * mesh.axes()[*b].step);
        out.par_iter_mut().enumerate().for_each(|(idx, o)| {
            if !mesh.interior[idx] {
                return;
            }
            let v = |j: usize| c[j] * psi[j];
            *o += scale * (v(idx + sa + sb) - v(idx + sa - sb) - v(idx - sa + sb) + v(idx - sa - sb));
        });
    }
}

/// Solves `(I - w A_a) y = rhs` along every line of axis `a`; `rhs` is
/// overwritten with the solution.
fn solve_axis(mesh: &Mesh, op: &Operator, a: usize, w: f64, rhs: &mut [f64]) -> Result<()> {
    let s = mesh.stride(a);
    let n = mesh.axes()[a].len;
    let h = mesh.axes()[a].step;
    let (c1, c2) = (0.5 / h, 0.5 / (h * h));
    let mu = &op.drift[a];
    let dd = &op.diffusion[a];
    let kill = op.kill.as_ref().filter(|(ax, _)| *ax == a).map(|(_, k)| k);
    let m = n - 2;
    let src: &[f64] = rhs;
    let solved: Vec<Result<Vec<f64>>> = mesh.line_starts[a]
        .par_iter()
        .map(|&start| {
            let mut lo = vec![0.0; m];
            let mut di = vec![0.0; m];
            let mut up = vec![0.0; m];
            let mut x = vec![0.0; m];
            let mut scratch = vec![0.0; m];
            for r in 0..m {
                let i = r + 1;
                let idx = start + i * s;
                let (p, q) = (idx + s, idx - s);
                lo[r] = -w * (mu[q] * c1 + dd[q] * c2);
                up[r] = -w * (-mu[p] * c1 + dd[p] * c2);
                di[r] = 1.0 - w * (-2.0 * dd[idx] * c2 - kill.map_or(0.0, |k| k[idx]));
                x[r] = src[idx];
            }
            solve_tridiagonal_in_place(&lo, &di, &up, &mut x, &mut scratch)?;
            Ok(x)
        })
        .collect();
    for (&start, line) in mesh.line_starts[a].iter().zip(solved) {
        let line = line?;
        for (r, v) in line.into_iter().enumerate() {
            rhs[start + (r + 1) * s] = v;
        }
    }
    for (idx, v) in rhs.iter_mut().enumerate() {
        if !mesh.interior[idx] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// One Douglas step of size `dt` with weight `theta`.
pub fn douglas_step(mesh: &Mesh, op: &Operator, psi: &mut [f64], dt: f64, theta: f64) -> Result<()> {
    let n = mesh.size();
    let d = mesh.dim();
    let mut axis_terms = vec![vec![0.0; n]; d];
    for (a, out) in axis_terms.iter_mut().enumerate() {
        apply_axis(mesh, op, a, psi, out);
    }
    let mut y = vec![0.0; n];
    apply_mixed(mesh, op, psi, &mut y);
    y.par_iter_mut().enumerate().for_each(|(idx, v)| {
        let mut acc = *v;
        for t in &axis_terms {
            acc += t[idx];
        }
        *v = psi[idx] + dt * acc;
    });
    for (a, term) in axis_terms.iter().enumerate() {
        y.par_iter_mut().zip(term.par_iter()).for_each(|(v, t)| *v -= theta * dt * t);
        solve_axis(mesh, op, a, theta * dt, &mut y)?;
    }
    psi.copy_from_slice(&y);
    Ok(())
}

/// Largest value of `dt |C_ab| / (h_a h_b)` over the mixed terms; the
/// explicit mixed treatment is reliable when this stays below one.
pub fn mixed_stability_ratio(mesh: &Mesh, op: &Operator, dt: f64) -> f64 {
    op.mixed
        .iter()
        .map(|(a, b, c)| {
            let hh = mesh.axes()[*a].step * mesh.axes()[*b].step;
            c.iter().fold(0.0f64, |m, v| m.max(v.abs())) * dt / hh
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_equation_preserves_mass_and_grows_variance_exactly() {
        let mesh = Mesh::new(vec![Axis::uniform(-5.0, 5.0, 201).unwrap()]).unwrap();
        let mut op = Operator::zeros(&mesh);
        op.diffusion[0].iter_mut().for_each(|d| *d = 0.5);
        op.drift[0].iter_mut().for_each(|m| *m = 0.1);
        let h = mesh.axes()[0].step;
        let mut psi = mesh.map_nodes(|x| (-0.5 * x[0] * x[0] / 0.04).exp());
        let mass0: f64 = psi.iter().sum();
        psi.iter_mut().for_each(|p| *p /= mass0 * h);
        let moments = |p: &[f64]| {
            let xs = mesh.axes()[0].coords();
            let m0: f64 = p.iter().sum::<f64>() * h;
            let m1: f64 = p.iter().zip(&xs).map(|(a, x)| a * x).sum::<f64>() * h;
            let m2: f64 = p.iter().zip(&xs).map(|(a, x)| a * x * x).sum::<f64>() * h;
            (m0, m1 / m0, m2 / m0 - (m1 / m0).powi(2))
        };
        for _ in 0..100 {
            douglas_step(&mesh, &op, &mut psi, 0.01, 0.5).unwrap();
        }
        let (m0, mean, var) = moments(&psi);
        assert!((m0 - 1.0).abs() < 1e-8);
        assert!((mean - 0.1).abs() < 1e-8);
        assert!((var - (0.04 + 0.5)).abs() < 1e-8);
    }

    #[test]
    fn mixed_term_builds_covariance() {
        let ax = Axis::uniform(-4.0, 4.0, 81).unwrap();
        let mesh = Mesh::new(vec![ax, ax]).unwrap();
        let mut op = Operator::zeros(&mesh);
        for a in 0..2 {
            op.diffusion[a].iter_mut().for_each(|d| *d = 1.0);
        }
        op.mixed.push((0, 1, vec![0.5; mesh.size()]));
        let mut psi = mesh.map_nodes(|x| (-0.5 * (x[0] * x[0] + x[1] * x[1]) / 0.09).exp());
        let s: f64 = psi.iter().sum();
        psi.iter_mut().for_each(|p| *p /= s);
        for _ in 0..50 {
            douglas_step(&mesh, &op, &mut psi, 0.01, 0.5).unwrap();
        }
        let pts = mesh.map_nodes(|x| x[0] * x[1]);
        let cov: f64 = psi.iter().zip(&pts).map(|(p, c)| p * c).sum();
        assert!((cov - 0.25).abs() < 1e-3, "cov {cov}");
        let m: f64 = psi.iter().sum();
        assert!((m - 1.0).abs() < 1e-5, "mass {m}");
    }
}
