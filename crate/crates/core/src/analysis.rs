//! Sweeps over ε that turn the asymptotic statements into measured numbers:
//! remainder of the first-order expansion, gap between the decoupling fields
//! with and without common noise, Nash gap of the corrected strategy, and
//! stability under a shift of the initial law.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::measure::GridDensity;
use crate::mfg0::{solve_mfg0, solve_subgame, Mfg0Solution};
use crate::model::{MeanFieldCost, ModelSpec};
use crate::rng::SeedStream;
use crate::tree::{
    best_response, evaluate_cost, sample_eps_paths, simulate_paths_with, solve_eps_mfg, solve_eps_subgame,
    CommonNoiseTree, FixedPointConfig, FrozenFlow, Strategy, TreeSolution,
};
use crate::variational::{simulate_x0, solve_tree_variational, FdConfig, TreeVariational, VariationalMode};

/// Metrics below this are treated as round-off, whatever the control run says.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Ordinary least squares of log y on log x.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::domain(format!(
            "slope fit needs at least 3 matched points (got {} and {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::domain("slope fit needs positive finite values"));
    }
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("slope fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = if xs.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(SlopeFit {
        slope,
        stderr,
        intercept,
    })
}

/// One measured curve over ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment: String,
    pub eps_values: Vec<f64>,
    pub metrics: Vec<f64>,
    pub included: Vec<bool>,
    pub fitted_slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub intercept: Option<f64>,
    pub discretization_floor: f64,
    /// ε of the control run that measured the floor.
    pub floor_eps: f64,
    pub flags: Vec<String>,
    /// Per-point secondary quantities (experiment specific).
    pub details: Vec<serde_json::Value>,
    pub config: serde_json::Value,
    /// Seconds per point; kept out of the serialised report so re-runs compare byte for byte.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

impl SweepReport {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        experiment: &str,
        eps_values: Vec<f64>,
        metrics: Vec<f64>,
        floor: f64,
        floor_eps: f64,
        details: Vec<serde_json::Value>,
        config: serde_json::Value,
        wall_clock: Vec<f64>,
    ) -> Self {
        let floor = floor.max(ROUNDOFF_FLOOR);
        let included: Vec<bool> = metrics.iter().map(|&m| m >= 3.0 * floor).collect();
        let xs: Vec<f64> = eps_values.iter().zip(&included).filter(|p| *p.1).map(|p| *p.0).collect();
        let ys: Vec<f64> = metrics.iter().zip(&included).filter(|p| *p.1).map(|p| *p.0).collect();
        let mut flags = Vec::new();
        let fit = fit_loglog_slope(&xs, &ys).ok();
        if included.iter().all(|&i| !i) {
            flags.push("all_points_at_floor".to_string());
        } else if fit.is_none() {
            flags.push("too_few_points_above_floor".to_string());
        }
        for (e, i) in eps_values.iter().zip(&included) {
            if !i {
                flags.push(format!("excluded_below_floor:eps={e}"));
            }
        }
        Self {
            experiment: experiment.to_string(),
            eps_values,
            metrics,
            included,
            fitted_slope: fit.map(|f| f.slope),
            slope_stderr: fit.map(|f| f.stderr),
            intercept: fit.map(|f| f.intercept),
            discretization_floor: floor,
            floor_eps,
            flags,
            details,
            config,
            wall_clock,
        }
    }

    pub fn all_at_floor(&self) -> bool {
        self.included.iter().all(|&i| !i)
    }

    /// Rows `eps,metric,floor,included_in_fit`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "eps,metric,floor,included_in_fit")?;
        for ((e, m), i) in self.eps_values.iter().zip(&self.metrics).zip(&self.included) {
            writeln!(out, "{e},{m},{},{i}", self.discretization_floor)?;
        }
        Ok(())
    }

    /// Two whitespace-separated columns `eps metric`, for plotting.
    pub fn write_data<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# eps {}", self.experiment)?;
        for (e, m) in self.eps_values.iter().zip(&self.metrics) {
            writeln!(out, "{e} {m}")?;
        }
        Ok(())
    }
}

/// Numerical settings shared by the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub grid: SpaceTimeGrid,
    pub tree: CommonNoiseTree,
    pub fp: FixedPointConfig,
    pub fd: FdConfig,
    pub mode: VariationalMode,
    pub n_particles: usize,
    pub seed: u64,
    /// ε of the control run that calibrates the discretisation floor.
    pub floor_eps: f64,
}

impl SweepSetup {
    fn snapshot(&self, model: &ModelSpec) -> serde_json::Value {
        serde_json::json!({
            "cost": model.cost,
            "sigma": model.sigma,
            "horizon": model.horizon,
            "initial_mean": model.initial_law.mean(),
            "setup": self,
        })
    }

    fn check(&self, model: &ModelSpec, eps: &[f64]) -> Result<()> {
        if self.tree.depth * self.tree.substeps != self.grid.nt {
            return Err(Error::config(format!(
                "tree depth {} times substeps {} must equal nt = {}",
                self.tree.depth, self.tree.substeps, self.grid.nt
            )));
        }
        if self.n_particles == 0 {
            return Err(Error::config("sweeps need at least one particle"));
        }
        if !(self.floor_eps > 0.0) {
            return Err(Error::config("floor control run needs a positive eps"));
        }
        if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::config("sweep eps values must be positive"));
        }
        if !model.initial_law.grid().same_cells(&self.grid.space) {
            return Err(Error::config("initial law must live on the sweep grid"));
        }
        Ok(())
    }
}

/// The ε-independent ingredients: the game without common noise, its
/// particle paths and the first-order correction on every branch.
pub struct Expansion {
    pub mfg0: Mfg0Solution,
    pub variational: TreeVariational,
}

/// `mfg0` may be a previously computed solve (e.g. from a cache) on the setup's grid.
pub fn prepare_expansion(model: &ModelSpec, setup: &SweepSetup, mfg0: Option<Mfg0Solution>) -> Result<Expansion> {
    let mfg0 = match mfg0 {
        Some(s) if s.grid == setup.grid && s.k0 == 0 => s,
        Some(_) => return Err(Error::config("supplied 0-MFG solution does not match the sweep grid")),
        None => solve_mfg0(model, &setup.grid, &setup.fp)?,
    };
    let x0 = simulate_x0(model, &mfg0, setup.n_particles, SeedStream::new(setup.seed, 0))?;
    let variational = solve_tree_variational(model, &mfg0, setup.tree, x0, setup.mode, &setup.fd)?;
    Ok(Expansion { mfg0, variational })
}

/// E sup_t ((X^ε − X⁰)/ε − U)² and the same for (Y, V), over all branches
/// (each with probability 2^−D) and all particles.
pub fn remainder(model: &ModelSpec, exp: &Expansion, sol: &TreeSolution) -> Result<(f64, f64)> {
    let tv = &exp.variational;
    let tree = tv.tree;
    if sol.tree != tree {
        return Err(Error::config("tree solution and variational ensemble disagree on the tree"));
    }
    let eps = sol.eps;
    if !(eps > 0.0) {
        return Err(Error::config("remainder needs eps > 0"));
    }
    let x0 = &tv.x0;
    let n = x0.n;
    let k = tree.substeps;
    let nt = x0.nt;
    let starts = x0.column(0);
    let per_leaf: Vec<(f64, f64)> = tree
        .level(tree.depth)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|leaf| {
            let paths = simulate_paths_with(sol, model, &starts, &vec![leaf; n], &x0.dw);
            let signs = CommonNoiseTree::jump_signs(leaf);
            let mut nodes = Vec::with_capacity(tree.depth);
            let mut node = 0usize;
            for s in &signs {
                nodes.push(node);
                node = CommonNoiseTree::descend(node, *s > 0.0);
            }
            let (mut sx, mut sy) = (0.0, 0.0);
            for j in 0..n {
                let (mut bx, mut by) = (0.0f64, 0.0f64);
                for t in 0..=nt {
                    let (nd, s) = if t == nt { (leaf, 0) } else { (nodes[t / k], t % k) };
                    let xe = paths.x[j * (nt + 1) + t];
                    let ye = paths.y[j * (nt + 1) + t];
                    let rx = (xe - x0.x_at(j, t)) / eps - tv.u_at(nd, s, j);
                    let ry = (ye - x0.y_at(j, t)) / eps - tv.v_at(nd, s, j);
                    bx = bx.max(rx * rx);
                    by = by.max(ry * ry);
                }
                sx += bx;
                sy += by;
            }
            (sx / n as f64, sy / n as f64)
        })
        .collect();
    let m = per_leaf.len() as f64;
    Ok((
        per_leaf.iter().map(|p| p.0).sum::<f64>() / m,
        per_leaf.iter().map(|p| p.1).sum::<f64>() / m,
    ))
}

/// Remainder of the first-order expansion against tree solutions at each ε.
pub fn remainder_sweep(model: &ModelSpec, eps: &[f64], setup: &SweepSetup) -> Result<SweepReport> {
    setup.check(model, eps)?;
    let exp = prepare_expansion(model, setup, None)?;
    remainder_sweep_with(model, eps, setup, &exp)
}

pub fn remainder_sweep_with(model: &ModelSpec, eps: &[f64], setup: &SweepSetup, exp: &Expansion) -> Result<SweepReport> {
    setup.check(model, eps)?;
    let mut all = vec![setup.floor_eps];
    all.extend_from_slice(eps);
    let mut metrics = Vec::new();
    let mut details = Vec::new();
    let mut clock = Vec::new();
    for &e in &all {
        let start = Instant::now();
        let sol = solve_eps_mfg(&model.with_eps(e), setup.tree, &setup.grid, &setup.fp)
            .map_err(|err| err.context(format!("remainder sweep at eps = {e}")))?;
        let (rx, ry) = remainder(model, exp, &sol)?;
        metrics.push(rx);
        details.push(serde_json::json!({ "eps": e, "remainder_x": rx, "remainder_y": ry,
            "fixed_point_iterations": sol.residual_history.len() }));
        clock.push(start.elapsed().as_secs_f64());
    }
    let floor = metrics.remove(0);
    let floor_detail = details.remove(0);
    clock.remove(0);
    let mut report = SweepReport::assemble(
        "remainder",
        eps.to_vec(),
        metrics,
        floor,
        setup.floor_eps,
        details,
        serde_json::json!({ "run": setup.snapshot(model), "floor_run": floor_detail }),
        clock,
    );
    if report.all_at_floor() {
        report.flags.push("exact_first_order".to_string());
    }
    Ok(report)
}

/// A probe (t, law) of the decoupling fields, evaluated at several x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub law: GridDensity,
    pub xs: Vec<f64>,
}

/// Default probes: t ∈ {0, T/2} on coarse nodes, the initial law and N(2, 0.25),
/// x at the law's mean and ±1, ±2 around it.
pub fn default_probes(model: &ModelSpec, setup: &SweepSetup) -> Result<Vec<Probe>> {
    let half = (setup.tree.depth / 2) * setup.tree.substeps;
    let times = [0.0, setup.grid.time(half)];
    let shifted = GridDensity::gaussian(setup.grid.space, 2.0, 0.5)?;
    let laws = [model.initial_law.clone(), shifted];
    let mut out = Vec::new();
    for &t in &times {
        for law in &laws {
            let m = law.mean();
            out.push(Probe {
                t,
                law: law.clone(),
                xs: vec![m - 2.0, m - 1.0, m, m + 1.0, m + 2.0],
            });
        }
    }
    Ok(out)
}

fn decoupling_gap(
    model: &ModelSpec,
    setup: &SweepSetup,
    probes: &[Probe],
    base: &[Vec<f64>],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = probes
        .par_iter()
        .zip(base)
        .map(|(p, u0)| -> Result<f64> {
            let sol = solve_eps_subgame(&model.with_eps(eps), setup.tree, &setup.grid, p.t, &p.law, &setup.fp)?;
            let mut sup = 0.0f64;
            for (&x, &uz) in p.xs.iter().zip(u0) {
                sup = sup.max((sol.decoupling(0, 0, x).0 - uz).abs());
            }
            Ok(sup)
        })
        .collect::<Result<_>>()?;
    Ok((per.iter().fold(0.0f64, |m, v| m.max(*v)), per))
}

/// sup over probes of |𝒰^ε − 𝒰⁰| for each ε.
pub fn decoupling_gap_sweep(model: &ModelSpec, eps: &[f64], setup: &SweepSetup, probes: &[Probe]) -> Result<SweepReport> {
    setup.check(model, eps)?;
    if probes.is_empty() {
        return Err(Error::config("decoupling gap needs at least one probe"));
    }
    let base: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let span = setup.grid.space;
            if p.xs.iter().any(|&x| x < span.xmin || x > span.xmax) {
                return Err(Error::domain(format!("probe x outside [{}, {}]", span.xmin, span.xmax)));
            }
            let sol = solve_subgame(model, p.t, &p.law, &setup.grid, &setup.fp)?.1;
            Ok(p.xs.iter().map(|&x| sol.decoupling(0, x).0).collect())
        })
        .collect::<Result<_>>()?;
    let mut metrics = Vec::new();
    let mut details = Vec::new();
    let mut clock = Vec::new();
    let mut all = vec![setup.floor_eps];
    all.extend_from_slice(eps);
    for &e in &all {
        let start = Instant::now();
        let (sup, per) =
            decoupling_gap(model, setup, probes, &base, e).map_err(|err| err.context(format!("decoupling gap at eps = {e}")))?;
        metrics.push(sup);
        details.push(serde_json::json!({ "eps": e, "sup_gap": sup, "sup_gap_over_eps": sup / e, "per_probe": per }));
        clock.push(start.elapsed().as_secs_f64());
    }
    // value differences below the fixed-point tolerance are not resolved by the solver
    let floor = metrics.remove(0).max(setup.fp.tol);
    let floor_detail = details.remove(0);
    clock.remove(0);
    let probe_desc: Vec<serde_json::Value> = probes
        .iter()
        .map(|p| serde_json::json!({ "t": p.t, "law_mean": p.law.mean(), "xs": p.xs }))
        .collect();
    Ok(SweepReport::assemble(
        "decoupling_gap",
        eps.to_vec(),
        metrics,
        floor,
        setup.floor_eps,
        details,
        serde_json::json!({ "run": setup.snapshot(model), "probes": probe_desc, "floor_run": floor_detail }),
        clock,
    ))
}

/// Nash-gap measurements for one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashGapPoint {
    pub eps: f64,
    /// E Σ ½ (β + ∂ₓv^BR(X^β))² Δt: the exact excess cost of β over the best
    /// response for the control-quadratic running cost.
    pub gap: f64,
    /// Same identity for the uncorrected strategy α̂⁰.
    pub gap_uncorrected: f64,
    /// Monte-Carlo J(β | m^β) minus the best-response value at the particles' starts.
    pub direct_gap: f64,
    pub direct_gap_stderr: f64,
    /// J(β | m^β) through the tree cost evaluator.
    pub cost: f64,
    pub best_response_value: f64,
}

pub fn nash_gap(model: &ModelSpec, exp: &Expansion, setup: &SweepSetup, eps: f64) -> Result<NashGapPoint> {
    let tv = &exp.variational;
    let tree = tv.tree;
    let x0 = &tv.x0;
    let n = x0.n;
    let k = tree.substeps;
    let nt = x0.nt;
    let dt = x0.dt;
    let model_e = model.with_eps(eps);
    let leaves: Vec<usize> = tree.level(tree.depth).collect();
    let mt = exp.mfg0.flow.terminal().mean();
    let jump = eps * (k as f64 * dt).sqrt();

    // population under β: conditional terminal mean m̄⁰_T + ε·mean(U_T)
    let beta_means: Vec<f64> = leaves
        .iter()
        .map(|&l| mt + eps * (0..n).map(|j| tv.u_at(l, 0, j)).sum::<f64>() / n as f64)
        .collect();
    // population under α̂⁰: everybody shifted by the common noise
    let plain_means: Vec<f64> = leaves
        .iter()
        .map(|&l| mt + jump * CommonNoiseTree::net_ups(l) as f64)
        .collect();
    let flow_beta = FrozenFlow {
        tree,
        eps,
        leaf_means: beta_means,
    };
    let flow_plain = FrozenFlow {
        tree,
        eps,
        leaf_means: plain_means,
    };
    let br = best_response(&model_e, &flow_beta, &setup.grid)?;
    let br_plain = best_response(&model_e, &flow_plain, &setup.grid)?;
    let open_loop = tv.open_loop(eps);
    let cost = evaluate_cost(&model_e, &setup.grid, &flow_beta, Strategy::OpenLoop(&open_loop))?;

    let per_leaf: Vec<(f64, f64, Vec<f64>)> = leaves
        .par_iter()
        .enumerate()
        .map(|(li, &leaf)| {
            let mut nodes = Vec::with_capacity(tree.depth);
            let mut node = 0usize;
            for s in CommonNoiseTree::jump_signs(leaf) {
                nodes.push(node);
                node = CommonNoiseTree::descend(node, s > 0.0);
            }
            let (mut g, mut gp) = (0.0, 0.0);
            let mut direct = Vec::with_capacity(n);
            for j in 0..n {
                let (mut acc, mut accp, mut run) = (0.0, 0.0, 0.0);
                for t in 0..nt {
                    let (nd, s) = (nodes[t / k], t % k);
                    let xb = x0.x_at(j, t) + eps * tv.u_at(nd, s, j);
                    let beta = x0.alpha_at(j, t) - eps * tv.v_at(nd, s, j);
                    let dv = br.solution.decoupling(nd, s, xb).0;
                    acc += 0.5 * (beta + dv).powi(2);
                    run += 0.5 * beta * beta;
                    let xp = x0.x_at(j, t) + br_plain.solution.nodes[nd].offset;
                    let dvp = br_plain.solution.decoupling(nd, s, xp).0;
                    accp += 0.5 * (x0.alpha_at(j, t) + dvp).powi(2);
                }
                g += acc * dt;
                gp += accp * dt;
                let xt = x0.x_at(j, nt) + eps * tv.u_at(leaf, 0, j);
                let sample = run * dt + model.cost.g(xt, flow_beta.leaf_means[li]);
                let v0 = crate::numerics::lerp(&setup.grid.space, br.solution.value_slice(0, 0), x0.x_at(j, 0));
                direct.push(sample - v0);
            }
            (g / n as f64, gp / n as f64, direct)
        })
        .collect();
    let m = per_leaf.len() as f64;
    let gap = per_leaf.iter().map(|p| p.0).sum::<f64>() / m;
    let gap_plain = per_leaf.iter().map(|p| p.1).sum::<f64>() / m;
    let samples: Vec<f64> = per_leaf.iter().flat_map(|p| p.2.iter().copied()).collect();
    let total = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / total;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (total - 1.0).max(1.0);
    Ok(NashGapPoint {
        eps,
        gap,
        gap_uncorrected: gap_plain,
        direct_gap: mean,
        direct_gap_stderr: (var / total).sqrt(),
        cost,
        best_response_value: br.value,
    })
}

/// Nash gap of the first-order corrected strategy for each ε.
pub fn nash_gap_sweep(model: &ModelSpec, eps: &[f64], setup: &SweepSetup) -> Result<SweepReport> {
    setup.check(model, eps)?;
    let exp = prepare_expansion(model, setup, None)?;
    nash_gap_sweep_with(model, eps, setup, &exp)
}

pub fn nash_gap_sweep_with(model: &ModelSpec, eps: &[f64], setup: &SweepSetup, exp: &Expansion) -> Result<SweepReport> {
    setup.check(model, eps)?;
    let mut all = vec![setup.floor_eps];
    all.extend_from_slice(eps);
    let mut metrics = Vec::new();
    let mut details = Vec::new();
    let mut clock = Vec::new();
    for &e in &all {
        let start = Instant::now();
        let p = nash_gap(model, exp, setup, e).map_err(|err| err.context(format!("nash gap at eps = {e}")))?;
        metrics.push(p.gap);
        details.push(serde_json::to_value(&p).expect("plain data"));
        clock.push(start.elapsed().as_secs_f64());
    }
    let floor = metrics.remove(0);
    let floor_detail = details.remove(0);
    clock.remove(0);
    let mut report = SweepReport::assemble(
        "nash_gap",
        eps.to_vec(),
        metrics,
        floor,
        setup.floor_eps,
        details,
        serde_json::json!({ "run": setup.snapshot(model), "floor_run": floor_detail }),
        clock,
    );
    let last = report.details.last().cloned().unwrap_or_default();
    if last["gap_uncorrected"].as_f64() > last["gap"].as_f64() {
        report.flags.push("correction_helps_at_largest_eps".to_string());
    }
    Ok(report)
}

/// E sup_t (X^ε(m₀ shifted by Δ) − X^ε(m₀))² / Δ² for each shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub eps: f64,
    pub shifts: Vec<f64>,
    pub ratios: Vec<f64>,
    /// E (ΔX_T)² / Δ²: the sup is usually attained at t = 0, the terminal ratio shows the flow's action.
    pub terminal_ratios: Vec<f64>,
    /// max ratio / min ratio.
    pub spread: f64,
    pub max_relative_deviation: f64,
}

/// Solve the ε-game from m₀ and from m₀ translated by each Δ (on a grid
/// translated with it, so the shifted law is represented exactly), and
/// compare particle paths driven by the same noises.
pub fn stability_check(model: &ModelSpec, shifts: &[f64], setup: &SweepSetup) -> Result<StabilityReport> {
    setup.check(model, &[1.0])?;
    if shifts.is_empty() || shifts.iter().any(|&d| d == 0.0 || !d.is_finite()) {
        return Err(Error::config("shifts must be nonzero"));
    }
    let n = setup.n_particles;
    let stream = SeedStream::new(setup.seed, 1);
    let base = solve_eps_mfg(model, setup.tree, &setup.grid, &setup.fp)?;
    let p0 = sample_eps_paths(&base, model, n, stream)?;
    let both: Vec<(f64, f64)> = shifts
        .par_iter()
        .map(|&d| -> Result<(f64, f64)> {
            let space = setup.grid.space.translated(d);
            let grid = SpaceTimeGrid::new(space, setup.grid.nt, setup.grid.horizon)?;
            let shifted = model.with_initial_law(model.initial_law.translated(d));
            let sol = solve_eps_mfg(&shifted, setup.tree, &grid, &setup.fp)?;
            let p1 = sample_eps_paths(&sol, &shifted, n, stream)?;
            let w = p0.times.len();
            let (mut acc, mut term) = (0.0, 0.0);
            for j in 0..n {
                let mut sup = 0.0f64;
                for t in 0..w {
                    let dx = p1.x[j * w + t] - p0.x[j * w + t];
                    sup = sup.max(dx * dx);
                }
                acc += sup;
                term += (p1.x[j * w + w - 1] - p0.x[j * w + w - 1]).powi(2);
            }
            Ok((acc / n as f64 / (d * d), term / n as f64 / (d * d)))
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = both.iter().map(|b| b.0).collect();
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
    let mid = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(StabilityReport {
        eps: model.eps,
        shifts: shifts.to_vec(),
        spread: hi / lo,
        max_relative_deviation: ratios.iter().map(|r| (r - mid).abs() / mid).fold(0.0, f64::max),
        ratios,
        terminal_ratios: both.iter().map(|b| b.1).collect(),
    })
}
