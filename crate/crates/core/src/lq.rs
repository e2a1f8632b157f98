//! Closed-form linear-quadratic benchmark: with g = q(x − κ m̄)²/2 the
//! decoupling field is a(t) x + b(t) m̄ for every common-noise intensity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rk4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub q: f64,
    pub kappa: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    /// Sup distance between the formulas and an independent RK4 integration.
    pub rk4_error: f64,
}

impl RiccatiSolution {
    pub fn rho(&self) -> f64 {
        self.q * (1.0 - self.kappa)
    }

    /// a(t) = q / (1 + q (T − t))
    pub fn a_at(&self, t: f64) -> f64 {
        self.q / (1.0 + self.q * (self.horizon - t))
    }

    /// s(t) = ρ / (1 + ρ (T − t)), ρ = q(1 − κ)
    pub fn s_at(&self, t: f64) -> f64 {
        let rho = self.rho();
        rho / (1.0 + rho * (self.horizon - t))
    }

    pub fn b_at(&self, t: f64) -> f64 {
        self.s_at(t) - self.a_at(t)
    }

    /// Propagator of the conditional mean from `t0` to `t1`.
    pub fn mean_propagator(&self, t0: f64, t1: f64) -> f64 {
        let rho = self.rho();
        (1.0 + rho * (self.horizon - t1)) / (1.0 + rho * (self.horizon - t0))
    }

    pub fn nt(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt() as f64
    }
}

pub fn solve_riccati(q: f64, kappa: f64, horizon: f64, nt: usize) -> Result<RiccatiSolution> {
    if !(q > 0.0) || !(horizon > 0.0) || nt < 2 {
        return Err(Error::config(format!(
            "riccati needs q > 0, T > 0 and nt >= 2 (got q={q}, T={horizon}, nt={nt})"
        )));
    }
    if kappa > 1.0 {
        return Err(Error::Assumption {
            message: format!("kappa = {kappa} > 1 breaks weak monotonicity; the mean equation may blow up"),
            witness: Some(serde_json::json!({ "kappa": kappa, "monotonicity_margin": q * (1.0 - kappa) })),
        });
    }
    let mut sol = RiccatiSolution {
        q,
        kappa,
        horizon,
        times: (0..=nt).map(|k| if k == nt { horizon } else { horizon * k as f64 / nt as f64 }).collect(),
        a: Vec::new(),
        b: Vec::new(),
        s: Vec::new(),
        rk4_error: 0.0,
    };
    sol.a = sol.times.iter().map(|&t| sol.a_at(t)).collect();
    sol.s = sol.times.iter().map(|&t| sol.s_at(t)).collect();
    sol.b = sol.s.iter().zip(&sol.a).map(|(s, a)| s - a).collect();

    // independent check: a' = a², s' = s² integrated backward from T
    let rho = sol.rho();
    let sub = 1000usize.div_ceil(nt).max(1);
    let steps = rk4(
        |_, y: &[f64]| vec![-y[0] * y[0], -y[1] * y[1]],
        &[q, rho],
        0.0,
        horizon,
        nt * sub,
    );
    let mut err = 0.0f64;
    for k in 0..=nt {
        let y = &steps[(nt - k) * sub];
        err = err.max((y[0] - sol.a[k]).abs()).max((y[1] - sol.s[k]).abs());
    }
    if !(err <= 1e-8) {
        return Err(Error::domain(format!("riccati formulas disagree with RK4 by {err:.3e}")));
    }
    sol.rk4_error = err;
    Ok(sol)
}

/// a(t) x + b(t) m̄: the decoupling field, identical for every ε.
pub fn u_eps(t: f64, x: f64, mean: f64, r: &RiccatiSolution) -> Result<f64> {
    if !(0.0..=r.horizon).contains(&t) {
        return Err(Error::domain(format!("t = {t} outside [0, {}]", r.horizon)));
    }
    Ok(r.a_at(t) * x + r.b_at(t) * mean)
}

/// Conditional mean on the grid of `r`, with each common increment applied
/// at the end of its step (the convention of the tree solver).
pub fn exact_flow_mean(m0_mean: f64, eps: f64, r: &RiccatiSolution, wtilde_increments: &[f64]) -> Result<Vec<f64>> {
    let nt = r.nt();
    if !wtilde_increments.is_empty() && wtilde_increments.len() != nt {
        return Err(Error::config(format!(
            "{} increments for a grid of {nt} steps",
            wtilde_increments.len()
        )));
    }
    let mut out = Vec::with_capacity(nt + 1);
    out.push(m0_mean);
    let mut m = m0_mean;
    for k in 0..nt {
        m *= r.mean_propagator(r.times[k], r.times[k + 1]);
        if let Some(dw) = wtilde_increments.get(k) {
            m += eps * dw;
        }
        out.push(m);
    }
    Ok(out)
}

/// Var U_t for dU = −s(t) U dt + dW̃, U₀ = 0: t (1 + ρ(T − t)) / (1 + ρT).
pub fn exact_variational_law(r: &RiccatiSolution) -> Vec<f64> {
    let rho = r.rho();
    let t_end = r.horizon;
    r.times
        .iter()
        .map(|&t| t * (1.0 + rho * (t_end - t)) / (1.0 + rho * t_end))
        .collect()
}

/// Optimal cost of a single player against a population whose terminal mean
/// is frozen at `terminal_mean` (no common noise): value A x²/2 + B x + C with
/// A' = A², B' = AB, C' = B²/2 − σ²A/2 integrated by RK4.
pub fn frozen_mean_value(
    q: f64,
    kappa: f64,
    sigma: f64,
    horizon: f64,
    terminal_mean: f64,
    m0_mean: f64,
    m0_second_moment: f64,
) -> f64 {
    let bt = -q * kappa * terminal_mean;
    let ct = 0.5 * q * kappa * kappa * terminal_mean * terminal_mean;
    let path = rk4(
        // reversed time τ = T − t
        |_, y: &[f64]| vec![-y[0] * y[0], -y[0] * y[1], 0.5 * sigma * sigma * y[0] - 0.5 * y[1] * y[1]],
        &[q, bt, ct],
        0.0,
        horizon,
        4000,
    );
    let y = path.last().expect("rk4 path");
    0.5 * y[0] * m0_second_moment + y[1] * m0_mean + y[2]
}
