//! One-step kernels for the backward HJB equation
//! −∂ₜu + (∂ₓu)²/2 − σ²/2 ∂ₓₓu = 0 and the forward Fokker–Planck equation
//! ∂ₜm = ∂ₓ(∂ₓu m) + σ²/2 ∂ₓₓm on a cell-centred grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numerics::{gradient, solve_tridiagonal, PentaSolver};

/// Time discretisation of the Hamiltonian (∂ₓu)²/2 in the HJB step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianScheme {
    /// ½ pᵏ⁺¹·pᵏ, linear in the unknown slice; unconditionally stable and
    /// exact in time for quadratic value functions.
    #[default]
    Linearized,
    /// ½ (pᵏ⁺¹)², fully explicit; subject to a CFL restriction.
    Explicit,
}

/// Reusable scratch for the one-step solvers of a fixed grid and time step.
#[derive(Debug, Clone)]
pub(crate) struct Kernels {
    pub grid: Grid,
    pub dt: f64,
    pub sigma: f64,
    pub scheme: HamiltonianScheme,
    penta: PentaSolver,
    p: Vec<f64>,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    scratch: Vec<f64>,
}

impl Kernels {
    pub fn new(grid: Grid, dt: f64, sigma: f64, scheme: HamiltonianScheme) -> Self {
        let n = grid.nx;
        Self {
            grid,
            dt,
            sigma,
            scheme,
            penta: PentaSolver::new(n),
            p: vec![0.0; n],
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            scratch: Vec::with_capacity(n),
        }
    }

    /// One backward step uᵏ⁺¹ → uᵏ.
    ///
    /// Derivatives use central differences with quadratic-extrapolation ghost
    /// values, so the end rows are the one-sided second-order stencils and
    /// quadratic value functions are reproduced exactly in space.
    pub fn hjb_step(&mut self, u_next: &[f64], u_out: &mut [f64]) -> Result<()> {
        let n = self.grid.nx;
        let h = self.grid.dx();
        let dt = self.dt;
        gradient(u_next, h, &mut self.p);
        let c = dt * self.sigma * self.sigma / (2.0 * h * h);
        self.penta.clear();
        u_out.copy_from_slice(u_next);
        match self.scheme {
            HamiltonianScheme::Linearized => {
                let w = dt / (4.0 * h);
                for i in 1..n - 1 {
                    let d = w * self.p[i];
                    self.penta.set(i, i - 1, -c - d);
                    self.penta.set(i, i, 1.0 + 2.0 * c);
                    self.penta.set(i, i + 1, -c + d);
                }
                let d0 = w * self.p[0];
                self.penta.set(0, 0, 1.0 - c - 3.0 * d0);
                self.penta.set(0, 1, 2.0 * c + 4.0 * d0);
                self.penta.set(0, 2, -c - d0);
                let dn = w * self.p[n - 1];
                self.penta.set(n - 1, n - 1, 1.0 - c + 3.0 * dn);
                self.penta.set(n - 1, n - 2, 2.0 * c - 4.0 * dn);
                self.penta.set(n - 1, n - 3, -c + dn);
            }
            HamiltonianScheme::Explicit => {
                let pmax = self.p.iter().fold(0.0f64, |a, &p| a.max(p.abs()));
                let s2 = self.sigma * self.sigma;
                if dt * pmax * pmax > s2 || dt * pmax / h > 1.0 {
                    let need = (pmax * pmax / s2).max(pmax / h);
                    return Err(Error::config(format!(
                        "explicit Hamiltonian step violates CFL (max |p| = {pmax:.3}, dt = {dt:.3e}); \
                         use dt <= {:.3e}, i.e. at least {} steps per unit time",
                        1.0 / need,
                        need.ceil() as u64
                    )));
                }
                for i in 1..n - 1 {
                    self.penta.set(i, i - 1, -c);
                    self.penta.set(i, i, 1.0 + 2.0 * c);
                    self.penta.set(i, i + 1, -c);
                }
                self.penta.set(0, 0, 1.0 - c);
                self.penta.set(0, 1, 2.0 * c);
                self.penta.set(0, 2, -c);
                self.penta.set(n - 1, n - 1, 1.0 - c);
                self.penta.set(n - 1, n - 2, 2.0 * c);
                self.penta.set(n - 1, n - 3, -c);
                for (u, p) in u_out.iter_mut().zip(&self.p) {
                    *u -= 0.5 * dt * p * p;
                }
            }
        }
        self.penta.solve(u_out);
        Ok(())
    }

    /// One implicit Fokker–Planck step with the drift taken from the value slice `u`.
    pub fn fp_step(&mut self, m_prev: &[f64], u: &[f64], m_out: &mut [f64]) {
        let h = self.grid.dx();
        let n = self.grid.nx;
        // face velocities −(u_{i+1} − u_i)/h are stashed in `p`
        for i in 0..n - 1 {
            self.p[i] = -(u[i + 1] - u[i]) / h;
        }
        self.p[n - 1] = 0.0;
        let faces = std::mem::take(&mut self.p);
        self.fp_step_faces(m_prev, &faces[..n - 1], m_out);
        self.p = faces;
    }

    /// Implicit Fokker–Planck step for given face velocities (`n − 1` interior faces).
    ///
    /// Faces with cell Péclet number |v| h / σ² ≤ 1 use the centred flux,
    /// the others upwinding; either way the matrix is an M-matrix with unit
    /// column sums, so mass is conserved and weights stay nonnegative.
    pub fn fp_step_faces(&mut self, m_prev: &[f64], faces: &[f64], m_out: &mut [f64]) {
        let h = self.grid.dx();
        let diff = 0.5 * self.sigma * self.sigma / h;
        let r = self.dt / h;
        self.lower.iter_mut().for_each(|v| *v = 0.0);
        self.upper.iter_mut().for_each(|v| *v = 0.0);
        self.diag.iter_mut().for_each(|v| *v = 1.0);
        let s2 = self.sigma * self.sigma;
        for (i, &v) in faces.iter().enumerate() {
            // flux F = cl·m_i + cr·m_{i+1}
            let (cl, cr) = if v.abs() * h <= s2 {
                (0.5 * v + diff, 0.5 * v - diff)
            } else {
                (v.max(0.0) + diff, -(-v).max(0.0) - diff)
            };
            self.diag[i] += r * cl;
            self.upper[i] += r * cr;
            self.lower[i + 1] -= r * cl;
            self.diag[i + 1] -= r * cr;
        }
        m_out.copy_from_slice(m_prev);
        solve_tridiagonal(&self.lower, &self.diag, &self.upper, m_out, &mut self.scratch);
        for m in m_out.iter_mut() {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hjb_step_is_exact_for_quadratics() {
        // a quadratic slice must map to the quadratic given by the scheme's coefficient recursion
        let grid = Grid::new(-3.0, 4.0, 70).unwrap();
        let dt = 0.01;
        let sigma = 0.5;
        let mut k = Kernels::new(grid, dt, sigma, HamiltonianScheme::Linearized);
        let (a, b, c0) = (1.3, -0.4, 0.2);
        let u1: Vec<f64> = grid.centers().iter().map(|x| 0.5 * a * x * x + b * x + c0).collect();
        let mut u0 = vec![0.0; grid.nx];
        k.hjb_step(&u1, &mut u0).unwrap();
        let a0 = a / (1.0 + dt * a);
        // linear coefficient: B0 (1 + dt A1 /2) + dt/2 B1 A0 = B1
        let b0 = (b - 0.5 * dt * b * a0) / (1.0 + 0.5 * dt * a);
        // constant: C0 − dt σ²/2 A0 + dt/2 B1 B0 = C1
        let cc = c0 + dt * sigma * sigma / 2.0 * a0 - 0.5 * dt * b * b0;
        for (x, u) in grid.centers().iter().zip(&u0) {
            let want = 0.5 * a0 * x * x + b0 * x + cc;
            assert!((u - want).abs() < 1e-11, "{u} vs {want}");
        }
    }

    #[test]
    fn explicit_scheme_reports_cfl() {
        let grid = Grid::new(-3.0, 3.0, 60).unwrap();
        let mut k = Kernels::new(grid, 0.5, 0.1, HamiltonianScheme::Explicit);
        let u1: Vec<f64> = grid.centers().iter().map(|x| 2.0 * x * x).collect();
        let mut u0 = vec![0.0; grid.nx];
        assert!(matches!(k.hjb_step(&u1, &mut u0), Err(Error::Config { .. })));
    }

    #[test]
    fn fp_conserves_mass_and_positivity() {
        let grid = Grid::new(-3.0, 3.0, 60).unwrap();
        let mut k = Kernels::new(grid, 0.05, 0.2, HamiltonianScheme::Linearized);
        let mut m = vec![0.0; 60];
        m[10] = 0.7;
        m[45] = 0.3;
        let u: Vec<f64> = grid.centers().iter().map(|x| (3.0 * x).sin() * 2.0 + x * x).collect();
        let mut next = vec![0.0; 60];
        for _ in 0..50 {
            k.fp_step(&m, &u, &mut next);
            std::mem::swap(&mut m, &mut next);
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn fp_mean_is_exact_for_affine_drift() {
        // drift −(a x + b): implicit Euler mean recursion m̄' (1 + dt a) = m̄ − dt b
        let grid = Grid::new(-6.0, 6.0, 240).unwrap();
        let dt = 0.02;
        let mut k = Kernels::new(grid, dt, 0.5, HamiltonianScheme::Linearized);
        let (a, b) = (0.7, 0.3);
        let u: Vec<f64> = grid.centers().iter().map(|x| 0.5 * a * x * x + b * x).collect();
        let mut m: Vec<f64> = grid.centers().iter().map(|x| (-(x - 1.0) * (x - 1.0) / 0.5).exp()).collect();
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|w| *w /= s);
        let mean = |m: &[f64]| m.iter().zip(grid.centers()).map(|(w, x)| w * x).sum::<f64>();
        let mut next = vec![0.0; 240];
        let mut want = mean(&m);
        for _ in 0..20 {
            k.fp_step(&m, &u, &mut next);
            std::mem::swap(&mut m, &mut next);
            want = (want - dt * b) / (1.0 + dt * a);
            assert!((mean(&m) - want).abs() < 1e-12);
        }
    }
}
