//! Small numerical building blocks: normal distribution, interpolation,
//! tridiagonal solves and Cholesky factorisation.

use crate::error::{invalid, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cumulative distribution.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Index `i` such that `xs[i] <= x < xs[i + 1]`, clamped to `[0, n - 2]`.
/// `xs` must be strictly increasing with at least two points.
#[inline]
pub fn bracket(xs: &[f64], x: f64) -> usize {
    let n = xs.len();
    debug_assert!(n >= 2);
    if x <= xs[0] {
        return 0;
    }
    if x >= xs[n - 1] {
        return n - 2;
    }
    match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    }
}

/// Piecewise-linear interpolation with flat extrapolation.
pub fn interp_linear_flat(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = bracket(xs, x);
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + w * (ys[i + 1] - ys[i])
}

pub(crate) fn check_increasing(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(invalid(format!("{name} must not be empty")));
    }
    for (i, x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(invalid(format!("{name}[{i}] is not finite")));
        }
        if i > 0 && *x <= xs[i - 1] {
            return Err(invalid(format!(
                "{name} must be strictly increasing ({} then {})",
                xs[i - 1],
                x
            )));
        }
    }
    Ok(())
}

/// Natural cubic spline through `(x_i, y_i)`, flat outside the knots.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalCubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        check_increasing("spline knots", &x)?;
        if x.len() != y.len() {
            return Err(invalid("spline knots and values differ in length"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("spline values must be finite"));
        }
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut a = vec![0.0; k];
            let mut b = vec![0.0; k];
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                a[j] = h0;
                b[j] = 2.0 * (h0 + h1);
                c[j] = h1;
                d[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            let inner = solve_tridiagonal(&a, &b, &c, &d)?;
            m[1..n - 1].copy_from_slice(&inner);
        }
        Ok(Self { x, y, m })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// Value, first and second derivative at `x`.
    pub fn eval_all(&self, x: f64) -> (f64, f64, f64) {
        let n = self.x.len();
        if n == 1 {
            return (self.y[0], 0.0, 0.0);
        }
        if x <= self.x[0] {
            return (self.y[0], 0.0, 0.0);
        }
        if x >= self.x[n - 1] {
            return (self.y[n - 1], 0.0, 0.0);
        }
        let i = bracket(&self.x, x);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - x) / h;
        let b = (x - self.x[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let v = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d1 = (y1 - y0) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0 + (3.0 * b * b - 1.0) * h * m1 / 6.0;
        let d2 = a * m0 + b * m1;
        (v, d1, d2)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_all(x).0
    }
}

/// Solves a tridiagonal system with sub-diagonal `a`, diagonal `b`,
/// super-diagonal `c` and right-hand side `d` (Thomas algorithm).
/// `a[0]` and `c[n - 1]` are ignored.
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let mut x = d.to_vec();
    let mut scratch = vec![0.0; d.len()];
    solve_tridiagonal_in_place(a, b, c, &mut x, &mut scratch)?;
    Ok(x)
}

/// In-place Thomas solve; `rhs` is overwritten with the solution.
pub fn solve_tridiagonal_in_place(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) -> Result<()> {
    let n = rhs.len();
    if n == 0 {
        return Ok(());
    }
    let mut beta = b[0];
    if beta == 0.0 {
        return Err(crate::Error::Numeric("singular tridiagonal system".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = c[i - 1] / beta;
        beta = b[i] - a[i] * scratch[i];
        if beta == 0.0 {
            return Err(crate::Error::Numeric("singular tridiagonal system".into()));
        }
        rhs[i] = (rhs[i] - a[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix
/// (row-major, `n x n`). Zero pivots are allowed, so singular
/// correlation matrices such as perfect correlation factor cleanly.
pub fn cholesky_psd(m: &[f64], n: usize) -> Result<Vec<f64>> {
    if m.len() != n * n {
        return Err(invalid("matrix size mismatch"));
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut s = m[j * n + j];
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if s < -1e-12 {
            return Err(invalid("correlation matrix is not positive semidefinite"));
        }
        let d = s.max(0.0).sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut t = m[i * n + j];
            for k in 0..j {
                t -= l[i * n + k] * l[j * n + k];
            }
            if d > 1e-14 {
                l[i * n + j] = t / d;
            } else if t.abs() > 1e-10 {
                return Err(invalid("correlation matrix is not positive semidefinite"));
            }
        }
    }
    Ok(l)
}

/// Pairwise (cascade) summation; the result depends only on the order of
/// `xs`, never on thread scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15, "{:e}", norm_cdf(1.0) - 0.841_344_746_068_542_9);
        assert!((norm_cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-15);
        assert!(norm_cdf(-40.0) >= 0.0);
    }

    #[test]
    fn spline_reproduces_cubic_free_data_linearly() {
        let x = vec![0.0, 1.0, 2.5, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let s = NaturalCubicSpline::new(x, y).unwrap();
        let (v, d1, d2) = s.eval_all(1.7);
        assert!((v - 2.4).abs() < 1e-14);
        assert!((d1 - 2.0).abs() < 1e-14);
        assert!(d2.abs() < 1e-13);
    }

    #[test]
    fn spline_derivatives_match_finite_differences() {
        let x: Vec<f64> = (0..9).map(|i| 0.5 + 0.1 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v: &f64| (3.0 * v).sin()).collect();
        let s = NaturalCubicSpline::new(x, y).unwrap();
        let h = 1e-5;
        for &p in &[0.63, 0.81, 1.04, 1.22] {
            let (_, d1, d2) = s.eval_all(p);
            let fd1 = (s.eval(p + h) - s.eval(p - h)) / (2.0 * h);
            let fd2 = (s.eval(p + h) - 2.0 * s.eval(p) + s.eval(p - h)) / (h * h);
            assert!((d1 - fd1).abs() < 1e-8);
            assert!((d2 - fd2).abs() < 1e-4);
        }
    }

    #[test]
    fn tridiagonal_matches_dense_product() {
        let a = [0.0, 1.0, -0.5, 0.3];
        let b = [4.0, 3.0, 5.0, 2.0];
        let c = [1.0, 0.2, 0.7, 0.0];
        let d = [1.0, 2.0, 3.0, 4.0];
        let x = solve_tridiagonal(&a, &b, &c, &d).unwrap();
        for i in 0..4 {
            let mut s = b[i] * x[i];
            if i > 0 {
                s += a[i] * x[i - 1];
            }
            if i < 3 {
                s += c[i] * x[i + 1];
            }
            assert!((s - d[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn cholesky_handles_perfect_correlation() {
        let m = [1.0, 1.0, 1.0, 1.0];
        let l = cholesky_psd(&m, 2).unwrap();
        assert_eq!(l, vec![1.0, 0.0, 1.0, 0.0]);
        let bad = [1.0, 0.9, 0.9, 0.9, 1.0, -0.9, 0.9, -0.9, 1.0];
        assert!(cholesky_psd(&bad, 3).is_err());
    }
}
