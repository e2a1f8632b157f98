//! Small dense-free linear algebra and interpolation kernels used by the PDE and particle code.

// banded solvers read more clearly with explicit indices
#![allow(clippy::needless_range_loop)]

use crate::grid::Grid;

/// Solve a tridiagonal system in place with the Thomas algorithm.
///
/// `lower[i]` multiplies `x[i-1]`, `upper[i]` multiplies `x[i+1]`. The matrices
/// assembled in this crate are M-matrices, so no pivoting is needed.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut Vec<f64>) {
    let n = diag.len();
    debug_assert!(lower.len() == n && upper.len() == n && rhs.len() == n);
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut denom = diag[0];
    scratch[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Banded system with two sub- and two super-diagonals, solved by Gaussian
/// elimination with partial pivoting (fill-in widens the upper band to four).
#[derive(Debug, Clone)]
pub struct PentaSolver {
    n: usize,
    // row r stores columns r-2 ..= r+4 (width 7); rows are swapped wholesale
    rows: Vec<[f64; 7]>,
    starts: Vec<isize>,
}

impl PentaSolver {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: vec![[0.0; 7]; n],
            starts: (0..n).map(|r| r as isize - 2).collect(),
        }
    }

    pub fn clear(&mut self) {
        for (r, row) in self.rows.iter_mut().enumerate() {
            *row = [0.0; 7];
            self.starts[r] = r as isize - 2;
        }
    }

    /// Set entry `(row, col)`; `col` must be within `row-2 ..= row+2`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let off = col as isize - self.starts[row];
        debug_assert!((0..5).contains(&off));
        self.rows[row][off as usize] = v;
    }

    #[inline]
    fn get(&self, row: usize, col: usize) -> f64 {
        let off = col as isize - self.starts[row];
        if (0..7).contains(&off) {
            self.rows[row][off as usize]
        } else {
            0.0
        }
    }

    #[inline]
    fn add(&mut self, row: usize, col: usize, v: f64) {
        let off = col as isize - self.starts[row];
        debug_assert!((0..7).contains(&off));
        self.rows[row][off as usize] += v;
    }

    /// Drop already-eliminated columns left of `col` so the stored window starts there.
    #[inline]
    fn rebase(&mut self, row: usize, col: usize) {
        let shift = col as isize - self.starts[row];
        if shift > 0 {
            let shift = shift as usize;
            let r = &mut self.rows[row];
            r.copy_within(shift.min(7).., 0);
            r[7 - shift.min(7)..].fill(0.0);
            self.starts[row] = col as isize;
        }
    }

    /// Factor and solve; the matrix is consumed (call `clear` before reuse).
    pub fn solve(&mut self, rhs: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            let last = (k + 2).min(n - 1);
            for r in k..=last {
                self.rebase(r, k);
            }
            let mut piv = k;
            let mut best = self.get(k, k).abs();
            for r in k + 1..=last {
                let v = self.get(r, k).abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if piv != k {
                self.rows.swap(k, piv);
                self.starts.swap(k, piv);
                rhs.swap(k, piv);
            }
            let pivot = self.get(k, k);
            let cmax = (k + 4).min(n - 1);
            for r in k + 1..=last {
                let f = self.get(r, k) / pivot;
                if f == 0.0 {
                    continue;
                }
                for c in k..=cmax {
                    let a = self.get(k, c);
                    if a != 0.0 {
                        self.add(r, c, -f * a);
                    }
                }
                rhs[r] -= f * rhs[k];
            }
        }
        for k in (0..n).rev() {
            let cmax = (k + 4).min(n - 1);
            let mut s = rhs[k];
            for c in k + 1..=cmax {
                s -= self.get(k, c) * rhs[c];
            }
            rhs[k] = s / self.get(k, k);
        }
    }
}

/// First derivative at cell centres: central inside, one-sided second order at the ends.
pub fn gradient(values: &[f64], dx: f64, out: &mut [f64]) {
    let n = values.len();
    out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dx);
    for i in 1..n - 1 {
        out[i] = (values[i + 1] - values[i - 1]) / (2.0 * dx);
    }
    out[n - 1] = (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * dx);
}

/// Second derivative at cell centres; the end rows reuse the neighbouring stencil,
/// matching the quadratic-extrapolation boundary of the HJB solver.
pub fn laplacian(values: &[f64], dx: f64, out: &mut [f64]) {
    let n = values.len();
    let h2 = dx * dx;
    for i in 1..n - 1 {
        out[i] = (values[i + 1] - 2.0 * values[i] + values[i - 1]) / h2;
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
}

/// Cubic Hermite interpolant through `(x_i, values_i)` with nodal slopes `slopes_i`.
/// Returns `(value, derivative)`. Outside the centre range it extrapolates linearly.
#[inline]
pub fn hermite(grid: &Grid, values: &[f64], slopes: &[f64], x: f64) -> (f64, f64) {
    let n = values.len();
    let h = grid.dx();
    let s = grid.locate(x);
    if s <= 0.0 {
        let d = (x - grid.center(0)) * slopes[0];
        return (values[0] + d, slopes[0]);
    }
    if s >= (n - 1) as f64 {
        let d = (x - grid.center(n - 1)) * slopes[n - 1];
        return (values[n - 1] + d, slopes[n - 1]);
    }
    let i = (s.floor() as usize).min(n - 2);
    let t = s - i as f64;
    let (y0, y1) = (values[i], values[i + 1]);
    let (m0, m1) = (slopes[i] * h, slopes[i + 1] * h);
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let v = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1;
    let d00 = 6.0 * t2 - 6.0 * t;
    let d10 = 3.0 * t2 - 4.0 * t + 1.0;
    let d01 = -6.0 * t2 + 6.0 * t;
    let d11 = 3.0 * t2 - 2.0 * t;
    let d = (d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1) / h;
    (v, d)
}

/// Piecewise-linear interpolation at cell centres with constant extension.
#[inline]
pub fn lerp(grid: &Grid, values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let s = grid.locate(x);
    if s <= 0.0 {
        return values[0];
    }
    if s >= (n - 1) as f64 {
        return values[n - 1];
    }
    let i = s.floor() as usize;
    let t = s - i as f64;
    values[i] * (1.0 - t) + values[i + 1] * t
}

/// Classical fourth-order Runge–Kutta for a system `y' = f(t, y)` on a uniform grid.
/// Returns the state at every grid time (including the initial one).
pub fn rk4<F>(f: F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Vec<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let h = (t1 - t0) / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0.to_vec();
    out.push(y.clone());
    let n = y.len();
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = f(t, &y);
        let tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
        let k2 = f(t + 0.5 * h, &tmp);
        let tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
        let k3 = f(t + 0.5 * h, &tmp);
        let tmp: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
        let k4 = f(t + h, &tmp);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(y.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        // naive Gaussian elimination with partial pivoting, test oracle only
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
            m.swap(k, p);
            x.swap(k, p);
            for r in k + 1..n {
                let f = m[r][k] / m[k][k];
                for c in k..n {
                    m[r][c] -= f * m[k][c];
                }
                x[r] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for c in k + 1..n {
                s -= m[k][c] * x[c];
            }
            x[k] = s / m[k][k];
        }
        x
    }

    #[test]
    fn thomas_matches_dense() {
        let n = 12;
        let lower: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { -0.3 - 0.01 * i as f64 }).collect();
        let upper: Vec<f64> = (0..n).map(|i| if i + 1 == n { 0.0 } else { -0.2 }).collect();
        let diag: Vec<f64> = (0..n).map(|i| 1.7 + 0.05 * i as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = diag[i];
            if i > 0 {
                a[i][i - 1] = lower[i];
            }
            if i + 1 < n {
                a[i][i + 1] = upper[i];
            }
        }
        let want = dense_solve(&a, &b);
        let mut got = b.clone();
        let mut scratch = Vec::new();
        solve_tridiagonal(&lower, &diag, &upper, &mut got, &mut scratch);
        for i in 0..n {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn penta_matches_dense_with_pivoting() {
        let n = 9;
        let mut a = vec![vec![0.0; n]; n];
        let mut s = PentaSolver::new(n);
        for r in 0..n {
            for c in r.saturating_sub(2)..=(r + 2).min(n - 1) {
                // weak diagonal so that pivoting actually happens
                let v = if r == c { 0.1 } else { 1.0 + 0.1 * (r as f64) - 0.3 * (c as f64).cos() };
                a[r][c] = v;
                s.set(r, c, v);
            }
        }
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let want = dense_solve(&a, &b);
        let mut got = b.clone();
        s.solve(&mut got);
        for i in 0..n {
            assert!((got[i] - want[i]).abs() < 1e-9, "{i}: {} vs {}", got[i], want[i]);
        }
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        let g = Grid::new(-1.0, 2.0, 15).unwrap();
        let f = |x: f64| 0.3 * x * x * x - x * x + 2.0 * x - 1.0;
        let df = |x: f64| 0.9 * x * x - 2.0 * x + 2.0;
        let v: Vec<f64> = g.centers().iter().map(|&x| f(x)).collect();
        let d: Vec<f64> = g.centers().iter().map(|&x| df(x)).collect();
        for &x in &[-0.8, -0.1, 0.37, 1.11, 1.8] {
            let (y, dy) = hermite(&g, &v, &d, x);
            assert!((y - f(x)).abs() < 1e-12);
            assert!((dy - df(x)).abs() < 1e-11);
        }
    }

    #[test]
    fn finite_differences_exact_on_quadratics() {
        let g = Grid::new(0.0, 1.0, 10).unwrap();
        let u: Vec<f64> = g.centers().iter().map(|&x| 2.0 * x * x - x + 3.0).collect();
        let mut d = vec![0.0; 10];
        let mut dd = vec![0.0; 10];
        gradient(&u, g.dx(), &mut d);
        laplacian(&u, g.dx(), &mut dd);
        for i in 0..10 {
            assert!((d[i] - (4.0 * g.center(i) - 1.0)).abs() < 1e-10);
            assert!((dd[i] - 4.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_exponential() {
        let path = rk4(|_, y| vec![-y[0]], &[1.0], 0.0, 1.0, 100);
        assert!((path[100][0] - (-1.0f64).exp()).abs() < 1e-9);
    }
}
