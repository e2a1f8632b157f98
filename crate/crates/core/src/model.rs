//! Problem data: noise intensities, horizon, initial law and the terminal
//! cost with its derivatives, plus sampled checks of the standing assumptions.

use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measure::{wasserstein2, EmpiricalMeasure, GridDensity, MeasureRef};
use crate::rng::SeedStream;

/// Terminal cost interacting with the population only through its mean.
///
/// Implement this to add a family; the solvers only ever call these evaluators.
pub trait MeanFieldCost: Send + Sync + Debug {
    fn g(&self, x: f64, mean: f64) -> f64;
    fn gx(&self, x: f64, mean: f64) -> f64;
    fn gxx(&self, x: f64, mean: f64) -> f64;
    /// Lifted measure derivative of `gx` at `m`, evaluated at the atom `z`.
    fn gxm(&self, x: f64, mean: f64, z: f64) -> f64;
    /// Declared Lipschitz constant of `gx` in `x`.
    fn lipschitz_x(&self) -> f64;
    /// Declared Lipschitz constant of `gx` in `m` (w.r.t. W2).
    fn lipschitz_m(&self) -> f64;
    /// Declared bound on `|gxx|` and Lipschitz constant of `gxx` in `x`.
    fn second_derivative_bounds(&self) -> (f64, f64);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CostFamily {
    /// g = q (x − κ m̄)² / 2
    Lq { q: f64, kappa: f64 },
    /// ∂ₓg = x + c tanh x − κ m̄
    Anharmonic { c: f64, kappa: f64 },
    /// g ≡ 0
    Null,
    #[serde(skip)]
    Custom(Arc<dyn MeanFieldCost>),
}

impl CostFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CostFamily::Lq { q, kappa } => {
                if !(q > 0.0 && q.is_finite()) || !kappa.is_finite() {
                    return Err(Error::config(format!("lq needs q > 0 and finite kappa (got q={q}, kappa={kappa})")));
                }
            }
            CostFamily::Anharmonic { c, kappa } => {
                if !(c >= 0.0 && c.is_finite()) || !kappa.is_finite() {
                    return Err(Error::config(format!(
                        "anharmonic needs c >= 0 and finite kappa (got c={c}, kappa={kappa})"
                    )));
                }
            }
            CostFamily::Null | CostFamily::Custom(_) => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostFamily::Lq { .. } => "lq",
            CostFamily::Anharmonic { .. } => "anharmonic",
            CostFamily::Null => "null",
            CostFamily::Custom(_) => "custom",
        }
    }

    pub fn is_lq(&self) -> bool {
        matches!(self, CostFamily::Lq { .. })
    }
}

impl MeanFieldCost for CostFamily {
    fn g(&self, x: f64, mean: f64) -> f64 {
        match self {
            CostFamily::Lq { q, kappa } => {
                let d = x - kappa * mean;
                0.5 * q * d * d
            }
            CostFamily::Anharmonic { c, kappa } => 0.5 * x * x + c * ln_cosh(x) - kappa * mean * x,
            CostFamily::Null => 0.0,
            CostFamily::Custom(f) => f.g(x, mean),
        }
    }

    fn gx(&self, x: f64, mean: f64) -> f64 {
        match self {
            CostFamily::Lq { q, kappa } => q * (x - kappa * mean),
            CostFamily::Anharmonic { c, kappa } => x + c * x.tanh() - kappa * mean,
            CostFamily::Null => 0.0,
            CostFamily::Custom(f) => f.gx(x, mean),
        }
    }

    fn gxx(&self, x: f64, mean: f64) -> f64 {
        match self {
            CostFamily::Lq { q, .. } => *q,
            CostFamily::Anharmonic { c, .. } => {
                let s = 1.0 / x.cosh();
                1.0 + c * s * s
            }
            CostFamily::Null => 0.0,
            CostFamily::Custom(f) => f.gxx(x, mean),
        }
    }

    fn gxm(&self, x: f64, mean: f64, z: f64) -> f64 {
        // mean-coupled families: the lifted derivative is constant in z
        match self {
            CostFamily::Lq { q, kappa } => -q * kappa,
            CostFamily::Anharmonic { kappa, .. } => -kappa,
            CostFamily::Null => 0.0,
            CostFamily::Custom(f) => f.gxm(x, mean, z),
        }
    }

    fn lipschitz_x(&self) -> f64 {
        match self {
            CostFamily::Lq { q, .. } => *q,
            CostFamily::Anharmonic { c, .. } => 1.0 + c,
            CostFamily::Null => 0.0,
            CostFamily::Custom(f) => f.lipschitz_x(),
        }
    }

    fn lipschitz_m(&self) -> f64 {
        match self {
            CostFamily::Lq { q, kappa } => q * kappa.abs(),
            CostFamily::Anharmonic { kappa, .. } => kappa.abs(),
            CostFamily::Null => 0.0,
            CostFamily::Custom(f) => f.lipschitz_m(),
        }
    }

    fn second_derivative_bounds(&self) -> (f64, f64) {
        match self {
            CostFamily::Lq { q, .. } => (*q, 0.0),
            // |d/dx sech²| = 2 sech² |tanh| ≤ 4/(3√3)
            CostFamily::Anharmonic { c, .. } => (1.0 + c, c * 4.0 / (3.0 * 3f64.sqrt())),
            CostFamily::Null => (0.0, 0.0),
            CostFamily::Custom(f) => f.second_derivative_bounds(),
        }
    }
}

/// ln cosh without overflow.
fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// dX = α dt + σ dW + ε dW̃ on [0, T], cost E[∫ α²/2 dt + g(X_T, m_T)].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub sigma: f64,
    pub eps: f64,
    pub horizon: f64,
    pub initial_law: GridDensity,
    pub cost: CostFamily,
}

impl ModelSpec {
    pub fn new(sigma: f64, eps: f64, horizon: f64, initial_law: GridDensity, cost: CostFamily) -> Result<Self> {
        let mut problems = Vec::new();
        if !(sigma > 0.0 && sigma.is_finite()) {
            problems.push(format!("sigma must be positive (got {sigma})"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            problems.push(format!("eps must be nonnegative (got {eps})"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            problems.push(format!("horizon must be positive (got {horizon})"));
        }
        if let Err(e) = cost.validate() {
            problems.push(e.to_string());
        }
        if !problems.is_empty() {
            return Err(Error::config(problems.join("; ")));
        }
        Ok(Self {
            sigma,
            eps,
            horizon,
            initial_law,
            cost,
        })
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn with_initial_law(&self, initial_law: GridDensity) -> Self {
        Self {
            initial_law,
            ..self.clone()
        }
    }

    /// g(x_i + offset, mean) at every cell centre.
    pub(crate) fn terminal_values(&self, grid: &Grid, offset: f64, mean: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.cost.g(grid.center(i) + offset, mean);
        }
    }
}

/// g(x, m) for any measure representation.
pub fn evaluate_terminal_cost<'a>(model: &ModelSpec, x: f64, m: impl Into<MeasureRef<'a>>) -> f64 {
    model.cost.g(x, m.into().mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub name: String,
    pub passed: bool,
    /// Worst sampled margin (negative means violated).
    pub worst_margin: f64,
    pub witness: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub family: String,
    pub n_probes: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// Assumption error carrying the failing checks, or `Ok` if everything passed.
    pub fn into_result(self) -> Result<Self> {
        if self.all_passed() {
            return Ok(self);
        }
        let failed: Vec<&AssumptionCheck> = self.checks.iter().filter(|c| !c.passed).collect();
        let names: Vec<String> = failed.iter().map(|c| format!("{} ({})", c.id, c.name)).collect();
        Err(Error::Assumption {
            message: format!("{} violated for the {} family", names.join(", "), self.family),
            witness: Some(serde_json::to_value(&failed).unwrap_or_default()),
        })
    }
}

struct Tracker {
    worst: f64,
    witness: serde_json::Value,
}

impl Tracker {
    fn new() -> Self {
        Self {
            worst: f64::INFINITY,
            witness: serde_json::Value::Null,
        }
    }

    fn offer(&mut self, margin: f64, witness: impl FnOnce() -> serde_json::Value) {
        if margin < self.worst {
            self.worst = margin;
            self.witness = witness();
        }
    }

    fn finish(self, id: &str, name: &str, tol: f64) -> AssumptionCheck {
        AssumptionCheck {
            id: id.into(),
            name: name.into(),
            passed: self.worst >= -tol,
            worst_margin: self.worst,
            witness: self.witness,
        }
    }
}

fn random_measure<R: Rng>(rng: &mut R) -> EmpiricalMeasure {
    let n = rng.random_range(1..=6);
    let centre = Uniform::new(-2.0, 2.0).unwrap().sample(rng);
    let spread = Normal::new(0.0, 1.5).unwrap();
    EmpiricalMeasure::new((0..n).map(|_| centre + spread.sample(rng)).collect()).expect("finite atoms")
}

/// Monte-Carlo probes of the standing assumptions on the terminal cost.
///
/// Margins are "allowed minus observed", so a negative worst margin is a
/// violation; every check keeps the probe that produced its worst margin.
pub fn check_assumptions(model: &ModelSpec, n_probes: usize, stream: SeedStream) -> Result<AssumptionReport> {
    if n_probes < 100 {
        return Err(Error::config(format!("n_probes must be at least 100 (got {n_probes})")));
    }
    let g = &model.cost;
    let mut rng = stream.rng();
    let ux = Uniform::new(-6.0, 6.0).unwrap();
    let lx = g.lipschitz_x();
    let lm = g.lipschitz_m();
    let (b2, l2) = g.second_derivative_bounds();

    let (mut a1, mut a2, mut a3, mut a4, mut a5) =
        (Tracker::new(), Tracker::new(), Tracker::new(), Tracker::new(), Tracker::new());

    for probe in 0..n_probes {
        let x: f64 = ux.sample(&mut rng);
        let mut xp = ux.sample(&mut rng);
        if xp == x {
            xp += 1e-3;
        }
        let m = random_measure(&mut rng);
        let mp = random_measure(&mut rng);
        let (mm, mmp) = (m.mean(), mp.mean());
        let dx = (x - xp).abs();
        let dgx = g.gx(x, mm) - g.gx(xp, mm);

        a1.offer(lx * dx + 1e-9 - dgx.abs(), || json!({"x": x, "x_prime": xp, "m_mean": mm, "ratio": dgx.abs() / dx}));

        let conv = (dgx * (x - xp)).min(g.gxx(x, mm) * dx * dx);
        a2.offer(conv, || json!({"x": x, "x_prime": xp, "m_mean": mm, "gxx": g.gxx(x, mm)}));

        let w = wasserstein2(&m, &mp)?;
        let dgm = (g.gx(x, mm) - g.gx(x, mmp)).abs();
        a3.offer(lm * w + 1e-9 - dgm, || {
            json!({"x": x, "m": m.atoms(), "m_prime": mp.atoms(), "w2": w, "difference": dgm})
        });

        // coupled samples (ξ, ξ'): independent redraw, deterministic shift, affine map
        let n = 8;
        let xi: Vec<f64> = (0..n).map(|_| ux.sample(&mut rng) * 0.5).collect();
        let xi_p: Vec<f64> = match probe % 3 {
            0 => (0..n).map(|_| ux.sample(&mut rng) * 0.5).collect(),
            1 => {
                let c = ux.sample(&mut rng);
                xi.iter().map(|v| v + c).collect()
            }
            _ => {
                let s = rng.random_range(-1.5..1.5);
                let c = ux.sample(&mut rng) * 0.3;
                xi.iter().map(|v| s * v + c).collect()
            }
        };
        let (mean, mean_p) = (mean_of(&xi), mean_of(&xi_p));
        let mono = xi
            .iter()
            .zip(&xi_p)
            .map(|(&a, &b)| (g.gx(a, mean) - g.gx(b, mean_p)) * (a - b))
            .sum::<f64>()
            / n as f64;
        a4.offer(mono, || json!({"xi": xi, "xi_prime": xi_p, "expectation": mono}));

        let h = g.gxx(x, mm);
        let dh = (h - g.gxx(xp, mm)).abs();
        a5.offer((b2 + 1e-9 - h.abs()).min(l2 * dx + 1e-9 - dh), || {
            json!({"x": x, "x_prime": xp, "m_mean": mm, "gxx": h, "gxx_difference": dh})
        });
    }

    Ok(AssumptionReport {
        family: g.name().into(),
        n_probes,
        checks: vec![
            a1.finish("A1", "lipschitz in x", 0.0),
            a2.finish("A2", "convexity", 1e-12),
            a3.finish("A3", "lipschitz in m", 0.0),
            a4.finish("A4", "weak monotonicity", 1e-10),
            a5.finish("A5", "bounded lipschitz second derivative", 0.0),
        ],
    })
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Compare the closed-form lifted derivative against a finite difference
/// obtained by shifting every atom along `direction`.
pub fn lifted_derivative_selfcheck(
    model: &ModelSpec,
    x: f64,
    m: &EmpiricalMeasure,
    direction: &[f64],
) -> Result<(f64, f64)> {
    if direction.len() != m.len() {
        return Err(Error::config(format!(
            "direction has {} entries for {} atoms",
            direction.len(),
            m.len()
        )));
    }
    let g = &model.cost;
    let mean = m.mean();
    let n = m.len() as f64;
    let analytic = m
        .atoms()
        .iter()
        .zip(direction)
        .map(|(&z, &d)| g.gxm(x, mean, z) * d)
        .sum::<f64>()
        / n;
    let delta = 1e-5;
    let shifted = EmpiricalMeasure::new(m.atoms().iter().zip(direction).map(|(&z, &d)| z + delta * d).collect())?;
    let fd = (g.gx(x, shifted.mean()) - g.gx(x, mean)) / delta;
    Ok((analytic, fd))
}
