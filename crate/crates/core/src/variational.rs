//! First-order correction in ε: the linear variational process (U, V).
//!
//! U is integrated forward through the decoupling V = γ U + η, where
//! γ = ∂ₓ𝒰⁰ along the unperturbed path and η(x) = Ê[∂ₘ𝒰⁰(t, x, m⁰_t)(X̂⁰) Û]
//! is the response of 𝒰⁰ to moving the population along U. η comes either
//! from two sub-game resolves with the population nudged by ±δU, or in the
//! LQ family from the closed form b(t)·mean(U).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq::{solve_riccati, RiccatiSolution};
use crate::measure::{project_atoms, sample};
use crate::mfg0::{solve_from, Mfg0Solution};
use crate::model::{CostFamily, MeanFieldCost, ModelSpec};
use crate::numerics::lerp;
use crate::rng::{brownian_increments, tags, SeedStream};
use crate::tree::{CommonNoiseTree, FixedPointConfig, OpenLoopPaths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationalMode {
    SubgameFd,
    LqClosedForm,
}

/// Settings for the finite-difference η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Nudge size; the direction is normalised to unit sup-norm first.
    pub delta: f64,
    /// Number of η refreshes over [0, T] in the dense ensemble (must divide nt).
    pub coarse_steps: usize,
    pub fp: FixedPointConfig,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            delta: 1e-2,
            coarse_steps: 8,
            fp: FixedPointConfig::default(),
        }
    }
}

/// Particle paths of the game without common noise, under −𝒰⁰.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct X0Paths {
    pub n: usize,
    pub nt: usize,
    pub dt: f64,
    /// Row-major `n × (nt + 1)`.
    pub x: Vec<f64>,
    /// Y⁰ = 𝒰⁰(t, X⁰, m⁰_t); the last column is ∂ₓg(X⁰_T, m⁰_T).
    pub y: Vec<f64>,
    /// ∂ₓ𝒰⁰ along the path, `n × (nt + 1)`; the last column is ∂ₓₓg.
    pub gamma: Vec<f64>,
    /// Individual Brownian increments, `n × nt`.
    pub dw: Vec<f64>,
}

impl X0Paths {
    #[inline]
    pub fn x_at(&self, j: usize, k: usize) -> f64 {
        self.x[j * (self.nt + 1) + k]
    }

    #[inline]
    pub fn y_at(&self, j: usize, k: usize) -> f64 {
        self.y[j * (self.nt + 1) + k]
    }

    #[inline]
    pub fn gamma_at(&self, j: usize, k: usize) -> f64 {
        self.gamma[j * (self.nt + 1) + k]
    }

    /// Equilibrium control α̂⁰ = −Y⁰ at step `k < nt`.
    #[inline]
    pub fn alpha_at(&self, j: usize, k: usize) -> f64 {
        -self.y_at(j, k)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.x_at(j, k)).collect()
    }
}

/// Euler–Maruyama under −𝒰⁰. Initial states and individual noise use the same
/// streams as the tree path sampler, so at ε = 0 both produce identical paths.
pub fn simulate_x0(model: &ModelSpec, mfg0: &Mfg0Solution, n: usize, stream: SeedStream) -> Result<X0Paths> {
    if mfg0.k0 != 0 {
        return Err(Error::config("variational paths need a solution over the whole horizon"));
    }
    let x0 = sample(&model.initial_law, n, stream.child(tags::INITIAL, 0))?;
    let nt = mfg0.grid.nt;
    let dt = mfg0.grid.dt();
    let dw = brownian_increments(stream, tags::INDIVIDUAL, n, nt, dt);
    let mt = mfg0.flow.terminal().mean();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = x0
        .atoms()
        .par_iter()
        .enumerate()
        .map(|(j, &start)| {
            let mut xs = Vec::with_capacity(nt + 1);
            let mut ys = Vec::with_capacity(nt + 1);
            let mut gs = Vec::with_capacity(nt + 1);
            let mut x = start;
            for k in 0..nt {
                let (y, g) = mfg0.decoupling(k, x);
                xs.push(x);
                ys.push(y);
                gs.push(g);
                x += -y * dt + model.sigma * dw[j * nt + k];
            }
            xs.push(x);
            ys.push(model.cost.gx(x, mt));
            gs.push(model.cost.gxx(x, mt));
            (xs, ys, gs)
        })
        .collect();
    let mut out = X0Paths {
        n,
        nt,
        dt,
        x: Vec::with_capacity(n * (nt + 1)),
        y: Vec::with_capacity(n * (nt + 1)),
        gamma: Vec::with_capacity(n * (nt + 1)),
        dw,
    };
    for (xs, ys, gs) in rows {
        out.x.extend(xs);
        out.y.extend(ys);
        out.gamma.extend(gs);
    }
    Ok(out)
}

/// Finite-difference measure derivative of 𝒰⁰ along a particle direction.
pub(crate) struct EtaOracle<'a> {
    model: &'a ModelSpec,
    mfg0: &'a Mfg0Solution,
    delta: f64,
    fp: FixedPointConfig,
    warm: Vec<Vec<f64>>,
}

impl<'a> EtaOracle<'a> {
    pub fn new(model: &'a ModelSpec, mfg0: &'a Mfg0Solution, delta: f64, fp: FixedPointConfig) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::config(format!("finite-difference step must be positive (got {delta})")));
        }
        Ok(Self {
            model,
            mfg0,
            delta,
            fp,
            warm: mfg0.flow.densities.iter().map(|d| d.weights().to_vec()).collect(),
        })
    }

    /// η on the grid for slices `k .. k + count`, for atoms `atoms` moved along `u`.
    ///
    /// The nudged populations are m⁰_t + proj(X⁰ ± δ û) − proj(X⁰) with
    /// û = u/‖u‖∞, which cancels most of the particle projection noise; the
    /// difference quotient is scaled back by ‖u‖∞, so η is exactly odd and
    /// exactly homogeneous of degree one under u → 2u.
    pub fn slices(&self, k: usize, atoms: &[f64], u: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        let grid = &self.mfg0.grid;
        let nx = grid.space.nx;
        let scale = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            return Ok(vec![vec![0.0; nx]; count]);
        }
        let base = project_atoms(atoms, &grid.space)?.density;
        // raw signed nudge m⁰ + proj(moved) − proj(X⁰); reports whether it went negative
        let nudged = |step: f64| -> Result<(Vec<f64>, bool)> {
            let moved: Vec<f64> = atoms.iter().zip(u).map(|(x, d)| x + step * (d / scale)).collect();
            let p = project_atoms(&moved, &grid.space)?.density;
            let w: Vec<f64> = self.warm[k]
                .iter()
                .zip(p.weights())
                .zip(base.weights())
                .map(|((m, a), b)| m + a - b)
                .collect();
            let negative = w.iter().any(|&v| v < 0.0);
            Ok((w, negative))
        };
        // shrink the nudge until neither side needs clipping; clipping would
        // bias the difference quotient at first order
        let mut delta = self.delta;
        let (mut up, mut down);
        loop {
            (up, down) = (nudged(delta)?, nudged(-delta)?);
            if !(up.1 || down.1) || delta <= self.delta / 64.0 {
                break;
            }
            delta *= 0.5;
        }
        let normalise = |(mut w, _): (Vec<f64>, bool)| {
            w.iter_mut().for_each(|v| *v = v.max(0.0));
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            w
        };
        let (up, down) = (normalise(up), normalise(down));
        let solve = |m: &[f64]| solve_from(self.model, grid, k, m, Some(&self.warm[k..]), &self.fp);
        let (a, b) = rayon::join(|| solve(&up), || solve(&down));
        let (a, b) = (a?, b?);
        let c = scale / (2.0 * delta);
        Ok((0..count)
            .map(|s| {
                a.ufield[s]
                    .iter()
                    .zip(&b.ufield[s])
                    .map(|(p, q)| (p - q) * c)
                    .collect()
            })
            .collect())
    }
}

fn representative_gxm(model: &ModelSpec, mfg0: &Mfg0Solution) -> f64 {
    let mt = mfg0.flow.terminal().mean();
    model.cost.gxm(mt, mt, mt)
}

fn lq_coefficients(model: &ModelSpec, nt: usize) -> Result<RiccatiSolution> {
    match model.cost {
        CostFamily::Lq { q, kappa } => solve_riccati(q, kappa, model.horizon, nt),
        _ => Err(Error::config(format!(
            "closed-form variational mode needs the LQ family (got {})",
            model.cost.name()
        ))),
    }
}

/// Ensemble of (U, V) over `n_common` common-noise paths with Gaussian
/// increments at every fine step, sharing one set of X⁰ paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalEnsemble {
    pub n_particles: usize,
    pub n_common: usize,
    pub mode: VariationalMode,
    pub times: Vec<f64>,
    /// `n_common × n_particles × (nt + 1)`, row-major.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub x0: X0Paths,
    /// Common increments, `n_common × nt`.
    pub wtilde: Vec<f64>,
}

impl VariationalEnsemble {
    pub fn nt(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    fn idx(&self, path: usize, j: usize, k: usize) -> usize {
        (path * self.n_particles + j) * (self.nt() + 1) + k
    }

    #[inline]
    pub fn u_at(&self, path: usize, j: usize, k: usize) -> f64 {
        self.u[self.idx(path, j, k)]
    }

    #[inline]
    pub fn v_at(&self, path: usize, j: usize, k: usize) -> f64 {
        self.v[self.idx(path, j, k)]
    }

    /// Rows `path,particle,t,x0,u,v` for the first `max_particles` particles.
    pub fn write_csv<W: Write>(&self, mut out: W, max_particles: usize) -> std::io::Result<()> {
        writeln!(out, "path,particle,t,x0,u,v")?;
        for p in 0..self.n_common {
            for j in 0..self.n_particles.min(max_particles) {
                for (k, t) in self.times.iter().enumerate() {
                    writeln!(
                        out,
                        "{p},{j},{t},{},{},{}",
                        self.x0.x_at(j, k),
                        self.u_at(p, j, k),
                        self.v_at(p, j, k)
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Simulate X⁰ paths, draw Gaussian common increments and integrate (U, V).
#[allow(clippy::too_many_arguments)]
pub fn solve_variational(
    model: &ModelSpec,
    mfg0: &Mfg0Solution,
    n_particles: usize,
    n_common: usize,
    mode: VariationalMode,
    stream: SeedStream,
    fd: &FdConfig,
) -> Result<VariationalEnsemble> {
    if n_common == 0 {
        return Err(Error::config("need at least one common-noise path"));
    }
    let x0 = simulate_x0(model, mfg0, n_particles, stream)?;
    let wtilde = brownian_increments(stream, tags::COMMON, n_common, x0.nt, x0.dt);
    solve_variational_with(model, mfg0, x0, wtilde, mode, fd)
}

/// Integrate (U, V) for given X⁰ paths and common increments (`n_common × nt`).
pub fn solve_variational_with(
    model: &ModelSpec,
    mfg0: &Mfg0Solution,
    x0: X0Paths,
    wtilde: Vec<f64>,
    mode: VariationalMode,
    fd: &FdConfig,
) -> Result<VariationalEnsemble> {
    let nt = x0.nt;
    let n = x0.n;
    if wtilde.is_empty() || !wtilde.len().is_multiple_of(nt) {
        return Err(Error::config(format!("common increments must come in rows of {nt}")));
    }
    if fd.coarse_steps == 0 || !nt.is_multiple_of(fd.coarse_steps) {
        return Err(Error::config(format!(
            "coarse steps {} must divide nt = {nt}",
            fd.coarse_steps
        )));
    }
    let m = wtilde.len() / nt;
    let dt = x0.dt;
    let riccati = match mode {
        VariationalMode::LqClosedForm => Some(lq_coefficients(model, nt)?),
        VariationalMode::SubgameFd => None,
    };
    let oracle = EtaOracle::new(model, mfg0, fd.delta, fd.fp)?;
    let window = nt / fd.coarse_steps;
    let gxm = representative_gxm(model, mfg0);
    let columns: Vec<Vec<f64>> = (0..=nt).map(|k| x0.column(k)).collect();

    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|p| -> Result<(Vec<f64>, Vec<f64>)> {
            let w = &wtilde[p * nt..(p + 1) * nt];
            // time-major scratch, transposed at the end
            let mut u = vec![vec![0.0; n]; nt + 1];
            let mut v = vec![vec![0.0; n]; nt + 1];
            let mut eta = vec![0.0; n];
            for k in 0..=nt {
                let mean_u = u[k].iter().sum::<f64>() / n as f64;
                match &riccati {
                    Some(r) => {
                        let (a, b) = (r.a[k], r.b[k]);
                        for j in 0..n {
                            v[k][j] = a * u[k][j] + b * mean_u;
                        }
                    }
                    None => {
                        if k == nt {
                            eta.iter_mut().for_each(|e| *e = gxm * mean_u);
                        } else if k % window == 0 {
                            let row = oracle
                                .slices(k, &columns[k], &u[k], 1)
                                .map_err(|e| e.context(format!("η at t = {}, path {p}", mfg0.grid.time(k))))?;
                            for (e, x) in eta.iter_mut().zip(&columns[k]) {
                                *e = lerp(&mfg0.grid.space, &row[0], *x);
                            }
                        }
                        for j in 0..n {
                            v[k][j] = x0.gamma_at(j, k) * u[k][j] + eta[j];
                        }
                    }
                }
                if k < nt {
                    let next: Vec<f64> = (0..n).map(|j| u[k][j] - v[k][j] * dt + w[k]).collect();
                    u[k + 1] = next;
                }
            }
            let mut uu = Vec::with_capacity(n * (nt + 1));
            let mut vv = Vec::with_capacity(n * (nt + 1));
            for j in 0..n {
                uu.extend((0..=nt).map(|k| u[k][j]));
                vv.extend((0..=nt).map(|k| v[k][j]));
            }
            Ok((uu, vv))
        })
        .collect::<Result<_>>()?;

    let mut u = Vec::with_capacity(m * n * (nt + 1));
    let mut v = Vec::with_capacity(m * n * (nt + 1));
    for (a, b) in paths {
        u.extend(a);
        v.extend(b);
    }
    Ok(VariationalEnsemble {
        n_particles: n,
        n_common: m,
        mode,
        times: mfg0.flow.times.clone(),
        u,
        v,
        x0,
        wtilde,
    })
}

/// β^ε = α̂⁰ − ε V along each (common path, particle).
#[derive(Debug, Clone, Copy)]
pub struct CorrectionStrategy<'a> {
    pub ensemble: &'a VariationalEnsemble,
    pub eps: f64,
}

pub fn build_correction_strategy(ensemble: &VariationalEnsemble, eps: f64) -> CorrectionStrategy<'_> {
    CorrectionStrategy { ensemble, eps }
}

impl CorrectionStrategy<'_> {
    /// −ε V: the first-order change of the control.
    #[inline]
    pub fn correction(&self, path: usize, j: usize, k: usize) -> f64 {
        -self.eps * self.ensemble.v_at(path, j, k)
    }

    #[inline]
    pub fn beta(&self, path: usize, j: usize, k: usize) -> f64 {
        self.ensemble.x0.alpha_at(j, k) + self.correction(path, j, k)
    }
}

/// Moment summary of one (particle, time) marginal across common paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalStats {
    pub particle: usize,
    pub t: f64,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    pub mean_ok: bool,
    pub shape_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub n_common: usize,
    pub u: Vec<MarginalStats>,
    pub v: Vec<MarginalStats>,
    /// Every marginal is degenerate (all increments zero): tests skipped.
    pub skipped: bool,
    /// Result of re-running with negated increments, when performed.
    pub antisymmetric: Option<bool>,
    pub all_passed: bool,
}

fn marginal(samples: &[f64], particle: usize, t: f64) -> MarginalStats {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let c2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
    let c3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / m;
    let c4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / m;
    let std = (c2 * m / (m - 1.0).max(1.0)).sqrt();
    let (skew, kurt) = if c2 > 0.0 {
        (c3 / c2.powf(1.5), c4 / (c2 * c2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let stderr = std / m.sqrt();
    MarginalStats {
        particle,
        t,
        mean,
        std,
        stderr,
        skewness: skew,
        excess_kurtosis: kurt,
        jarque_bera: m / 6.0 * (skew * skew + kurt * kurt / 4.0),
        mean_ok: mean.abs() <= 3.0 * stderr,
        shape_ok: skew.abs() <= 5.0 * (6.0 / m).sqrt() && kurt.abs() <= 5.0 * (24.0 / m).sqrt(),
    }
}

/// Mean-zero and Gaussian-shape diagnostics of U and V across common paths,
/// for each listed particle at each probe time (snapped to the grid).
pub fn gaussianity_diagnostics(
    ens: &VariationalEnsemble,
    t_probes: &[f64],
    particles: &[usize],
) -> Result<GaussianityReport> {
    let horizon = *ens.times.last().expect("time grid");
    let dt = horizon / ens.nt() as f64;
    let mut u = Vec::new();
    let mut v = Vec::new();
    for &t in t_probes {
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::domain(format!("probe time {t} outside [0, {horizon}]")));
        }
        let k = (t / dt).round() as usize;
        for &j in particles {
            if j >= ens.n_particles {
                return Err(Error::config(format!("particle {j} out of range")));
            }
            let us: Vec<f64> = (0..ens.n_common).map(|p| ens.u_at(p, j, k)).collect();
            let vs: Vec<f64> = (0..ens.n_common).map(|p| ens.v_at(p, j, k)).collect();
            u.push(marginal(&us, j, ens.times[k]));
            v.push(marginal(&vs, j, ens.times[k]));
        }
    }
    let skipped = u.iter().chain(&v).all(|s| s.std == 0.0);
    let all_passed = skipped || u.iter().chain(&v).all(|s| s.mean_ok && s.shape_ok);
    Ok(GaussianityReport {
        n_common: ens.n_common,
        u,
        v,
        skipped,
        antisymmetric: None,
        all_passed,
    })
}

/// Re-integrate with negated common increments and compare with −U, −V bitwise.
pub fn check_antisymmetry(model: &ModelSpec, mfg0: &Mfg0Solution, ens: &VariationalEnsemble, fd: &FdConfig) -> Result<bool> {
    let neg: Vec<f64> = ens.wtilde.iter().map(|w| -w).collect();
    let flipped = solve_variational_with(model, mfg0, ens.x0.clone(), neg, ens.mode, fd)?;
    Ok(flipped.u.iter().zip(&ens.u).all(|(a, b)| *a == -*b) && flipped.v.iter().zip(&ens.v).all(|(a, b)| *a == -*b))
}

/// (U, V) on every branch of a common-noise tree: no common noise inside a
/// coarse step, a jump ±√(coarse dt) at its end (including at T).
///
/// η is refreshed at every fine step from two sub-games per internal node
/// started at the node's time; inside a coarse step the nudged sub-game
/// flows follow the linearised motion of the population, so their slices
/// give η along the whole step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeVariational {
    pub tree: CommonNoiseTree,
    pub x0: X0Paths,
    /// Per node, `slices × n` (time-major): internal nodes hold substeps + 1
    /// slices (the last one before the jump), leaves one slice at T.
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl TreeVariational {
    pub fn n(&self) -> usize {
        self.x0.n
    }

    #[inline]
    pub fn u_at(&self, node: usize, slice: usize, j: usize) -> f64 {
        self.u[node][slice * self.x0.n + j]
    }

    #[inline]
    pub fn v_at(&self, node: usize, slice: usize, j: usize) -> f64 {
        self.v[node][slice * self.x0.n + j]
    }

    /// Open-loop ensemble of β^ε = α̂⁰ − εV along every (leaf, particle), with
    /// the matching terminal states X⁰_T + εU_T.
    pub fn open_loop(&self, eps: f64) -> OpenLoopPaths {
        let tree = self.tree;
        let n = self.n();
        let k = tree.substeps;
        let nt = self.x0.nt;
        let leaves = tree.level(tree.depth);
        let mut leaf = Vec::with_capacity(leaves.len() * n);
        let mut alpha = Vec::with_capacity(leaves.len() * n * nt);
        let mut x_terminal = Vec::with_capacity(leaves.len() * n);
        for l in leaves {
            let mut nodes = Vec::with_capacity(tree.depth);
            let mut node = 0usize;
            for s in CommonNoiseTree::jump_signs(l) {
                nodes.push(node);
                node = CommonNoiseTree::descend(node, s > 0.0);
            }
            for j in 0..n {
                leaf.push(l);
                for (d, &nd) in nodes.iter().enumerate() {
                    for s in 0..k {
                        alpha.push(self.x0.alpha_at(j, d * k + s) - eps * self.v_at(nd, s, j));
                    }
                }
                x_terminal.push(self.x0.x_at(j, nt) + eps * self.u_at(l, 0, j));
            }
        }
        OpenLoopPaths {
            dt: self.x0.dt,
            leaf,
            alpha,
            x_terminal,
        }
    }
}

/// Integrate (U, V) over all branches of `tree` for the given X⁰ paths.
pub fn solve_tree_variational(
    model: &ModelSpec,
    mfg0: &Mfg0Solution,
    tree: CommonNoiseTree,
    x0: X0Paths,
    mode: VariationalMode,
    fd: &FdConfig,
) -> Result<TreeVariational> {
    let k = tree.substeps;
    let nt = x0.nt;
    if tree.depth * k != nt || mfg0.grid.nt != nt {
        return Err(Error::config(format!(
            "tree depth {} times substeps {k} must equal nt = {nt}",
            tree.depth
        )));
    }
    let n = x0.n;
    let dt = x0.dt;
    let jump = (k as f64 * dt).sqrt();
    let riccati = match mode {
        VariationalMode::LqClosedForm => Some(lq_coefficients(model, nt)?),
        VariationalMode::SubgameFd => None,
    };
    let oracle = EtaOracle::new(model, mfg0, fd.delta, fd.fp)?;
    let gxm = representative_gxm(model, mfg0);
    let columns: Vec<Vec<f64>> = (0..=nt).map(|k| x0.column(k)).collect();

    let mut u: Vec<Vec<f64>> = (0..tree.node_count())
        .map(|i| vec![0.0; if tree.is_leaf(i) { n } else { (k + 1) * n }])
        .collect();
    let mut v = u.clone();

    // V = γ U + η on one slice
    let fill_v = |kk: usize, eta_row: Option<&[f64]>, us: &[f64], vs: &mut [f64]| {
        let mean_u = us.iter().sum::<f64>() / n as f64;
        for j in 0..n {
            vs[j] = match (&riccati, eta_row) {
                (Some(r), _) => r.a[kk] * us[j] + r.b[kk] * mean_u,
                (None, Some(row)) => x0.gamma_at(j, kk) * us[j] + lerp(&mfg0.grid.space, row, columns[kk][j]),
                (None, None) => x0.gamma_at(j, kk) * us[j] + gxm * mean_u,
            };
        }
    };

    for d in 0..=tree.depth {
        let range = tree.level(d);
        let (head, tail) = u.split_at_mut(range.start);
        let parents: &[Vec<f64>] = head;
        let vlevel = &mut v[range.clone()];
        tail[..range.len()]
            .par_iter_mut()
            .zip(vlevel.par_iter_mut())
            .enumerate()
            .try_for_each(|(off, (un, vn))| -> Result<()> {
                let i = range.start + off;
                if i > 0 {
                    let parent = (i - 1) / 2;
                    let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
                    let pu = &parents[parent][k * n..(k + 1) * n];
                    for j in 0..n {
                        un[j] = pu[j] + sign * jump;
                    }
                }
                let k0 = d * k;
                if d == tree.depth {
                    fill_v(nt, None, &un[..n], &mut vn[..n]);
                    return Ok(());
                }
                let eta = match riccati {
                    Some(_) => None,
                    None => Some(
                        oracle
                            .slices(k0, &columns[k0], &un[..n], k + 1)
                            .map_err(|e| e.context(format!("η at node {i}")))?,
                    ),
                };
                for s in 0..=k {
                    let (done, rest) = un.split_at_mut((s + 1) * n);
                    let us = &done[s * n..];
                    fill_v(k0 + s, eta.as_ref().map(|e| e[s].as_slice()), us, &mut vn[s * n..(s + 1) * n]);
                    if s < k {
                        for j in 0..n {
                            rest[j] = us[j] - vn[s * n + j] * dt;
                        }
                    }
                }
                Ok(())
            })?;
    }
    Ok(TreeVariational { tree, x0, u, v })
}
