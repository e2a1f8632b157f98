//! The game without common noise: forward-backward PDE system on a grid,
//! solved by damped Picard iteration on the flow, plus sub-games restarted
//! from an arbitrary (s, m) that define 𝒰⁰ away from the equilibrium flow.
//!
//! This runs the tree engine on a single coarse step, so an ε = 0 tree and
//! this solver perform literally the same arithmetic.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeGrid};
use crate::measure::{project_atoms, EmpiricalMeasure, GridDensity, MeasureFlow};
use crate::model::ModelSpec;
use crate::numerics::hermite;
use crate::tree::{CommonNoiseTree, Engine, FixedPointConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mfg0Solution {
    pub grid: SpaceTimeGrid,
    /// Index of the first time slice on `grid` (non-zero for sub-games).
    pub k0: usize,
    /// Value u⁰, one row per time slice from t_{k0} to T.
    pub u: Vec<Vec<f64>>,
    pub flow: MeasureFlow,
    /// 𝒰⁰(t, x, m⁰_t) = ∂ₓu⁰.
    pub ufield: Vec<Vec<f64>>,
    /// ∂ₓ𝒰⁰ = ∂ₓₓu⁰.
    pub gamma: Vec<Vec<f64>>,
    pub residual_history: Vec<f64>,
    /// Equilibrium cost E[∫ α²/2 dt + g(X_T, m_T)] by grid quadrature.
    pub equilibrium_cost: f64,
}

impl Mfg0Solution {
    pub fn space(&self) -> &Grid {
        &self.grid.space
    }

    pub fn t0(&self) -> f64 {
        self.grid.time(self.k0)
    }

    pub fn times(&self) -> &[f64] {
        &self.flow.times
    }

    /// 𝒰⁰ and ∂ₓ𝒰⁰ at slice `k` (relative to `k0`) and position `x`.
    #[inline]
    pub fn decoupling(&self, k: usize, x: f64) -> (f64, f64) {
        hermite(&self.grid.space, &self.ufield[k], &self.gamma[k], x)
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.flow.densities[k].mean()
    }

    pub fn last_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }

    /// Rows `t, x, u, ufield, gamma` for every grid point.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,u,ufield,gamma")?;
        let xs = self.grid.space.centers();
        for (k, &t) in self.flow.times.iter().enumerate() {
            for (i, x) in xs.iter().enumerate() {
                writeln!(
                    out,
                    "{t},{x},{},{},{}",
                    self.u[k][i], self.ufield[k][i], self.gamma[k][i]
                )?;
            }
        }
        Ok(())
    }

    /// Binary cache, all numbers little-endian:
    /// magic `MFG0SOL1`; xmin, xmax (f64); nx, nt, k0 (u64); horizon,
    /// equilibrium cost (f64); then u, ufield, gamma and densities, each
    /// `(nt − k0 + 1) × nx` f64 row-major; finally the residual count (u64)
    /// and residuals (f64).
    pub fn write_cache<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CACHE_MAGIC)?;
        let s = &self.grid.space;
        for v in [s.xmin, s.xmax] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [s.nx as u64, self.grid.nt as u64, self.k0 as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [self.grid.horizon, self.equilibrium_cost] {
            out.write_all(&v.to_le_bytes())?;
        }
        let dens: Vec<&[f64]> = self.flow.densities.iter().map(|d| d.weights()).collect();
        for block in [
            self.u.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
            self.ufield.iter().map(|r| r.as_slice()).collect(),
            self.gamma.iter().map(|r| r.as_slice()).collect(),
            dens,
        ] {
            for row in block {
                for v in row {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.write_all(&(self.residual_history.len() as u64).to_le_bytes())?;
        for v in &self.residual_history {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut input: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::config(format!("cannot read solution cache: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::config("not a solution cache (bad magic)"));
        }
        let mut f = || -> std::io::Result<f64> {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let xmin = f().map_err(io)?;
        let xmax = f().map_err(io)?;
        let nx = f().map_err(io)?.to_bits() as usize;
        let nt = f().map_err(io)?.to_bits() as usize;
        let k0 = f().map_err(io)?.to_bits() as usize;
        let horizon = f().map_err(io)?;
        let cost = f().map_err(io)?;
        let grid = SpaceTimeGrid::new(Grid::new(xmin, xmax, nx)?, nt, horizon)?;
        if k0 >= nt || nx > 1 << 24 || nt > 1 << 24 {
            return Err(Error::config("solution cache header is inconsistent"));
        }
        let rows = nt - k0 + 1;
        let mut block = || -> std::io::Result<Vec<Vec<f64>>> {
            (0..rows).map(|_| (0..nx).map(|_| f()).collect()).collect()
        };
        let u = block().map_err(io)?;
        let ufield = block().map_err(io)?;
        let gamma = block().map_err(io)?;
        let dens = block().map_err(io)?;
        let count = f().map_err(io)?.to_bits() as usize;
        if count > 1 << 20 {
            return Err(Error::config("solution cache header is inconsistent"));
        }
        let residual_history = (0..count).map(|_| f()).collect::<std::io::Result<_>>().map_err(io)?;
        let flow = MeasureFlow::new(
            (k0..=nt).map(|k| grid.time(k)).collect(),
            dens.into_iter().map(|w| GridDensity::from_raw(grid.space, w)).collect(),
        )?;
        Ok(Self {
            grid,
            k0,
            u,
            flow,
            ufield,
            gamma,
            residual_history,
            equilibrium_cost: cost,
        })
    }
}

const CACHE_MAGIC: &[u8; 8] = b"MFG0SOL1";

/// Solve the ε = 0 game on `grid` (the model's ε is ignored).
pub fn solve_mfg0(model: &ModelSpec, grid: &SpaceTimeGrid, fp: &FixedPointConfig) -> Result<Mfg0Solution> {
    if (grid.horizon - model.horizon).abs() > 1e-12 {
        return Err(Error::config(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon, model.horizon
        )));
    }
    if !model.initial_law.grid().same_cells(&grid.space) {
        return Err(Error::config("initial law must live on the solver grid"));
    }
    solve_from(model, grid, 0, model.initial_law.weights(), None, fp)
        .map_err(|e| e.context("mfg0 solve"))
}

/// The game restricted to [s, T] started from `m`; returns 𝒰⁰(s, ·, m) on the
/// grid and the full sub-solution.
pub fn solve_subgame(
    model: &ModelSpec,
    s: f64,
    m: &GridDensity,
    grid: &SpaceTimeGrid,
    fp: &FixedPointConfig,
) -> Result<(Vec<f64>, Mfg0Solution)> {
    if !m.grid().same_cells(&grid.space) {
        return Err(Error::config("sub-game law must live on the solver grid"));
    }
    let k = grid.index_of(s)?;
    if k >= grid.nt {
        return Err(Error::domain(format!("sub-game start s = {s} must lie in [0, T)")));
    }
    let sol = solve_from(model, grid, k, m.weights(), None, fp)
        .map_err(|e| e.context(format!("sub-game at s = {s}")))?;
    Ok((sol.ufield[0].clone(), sol))
}

/// Core sub-game solve from slice `k0` with optional warm-start densities
/// (one row per slice from `k0` to `nt`).
pub(crate) fn solve_from(
    model: &ModelSpec,
    grid: &SpaceTimeGrid,
    k0: usize,
    m0: &[f64],
    warm: Option<&[Vec<f64>]>,
    fp: &FixedPointConfig,
) -> Result<Mfg0Solution> {
    let k = grid.nt - k0;
    let tree = CommonNoiseTree::new(1, k)?;
    let engine = Engine::new(model, grid.space, tree, grid.time(k0), grid.dt(), 0.0, *fp)?;
    let warm = warm.map(|rows| {
        let mut root = Vec::with_capacity((k + 1) * grid.space.nx);
        for r in &rows[..=k] {
            root.extend_from_slice(r);
        }
        let end = rows[k].clone();
        vec![root, end.clone(), end]
    });
    let (dens, values, residuals) = engine.solve(m0, warm)?;
    let sol = engine.package(dens, values, residuals);
    Ok(from_tree(sol, grid, k0))
}

fn from_tree(sol: crate::tree::TreeSolution, grid: &SpaceTimeGrid, k0: usize) -> Mfg0Solution {
    let nx = grid.space.nx;
    let rows = |v: &[f64]| v.chunks(nx).map(|c| c.to_vec()).collect::<Vec<_>>();
    let root = &sol.nodes[0];
    let mut u = rows(&root.value);
    let mut ufield = rows(&root.ufield);
    let mut gamma = rows(&root.gamma);
    // the terminal slice lives on the leaves; the root's end slice equals it
    let leaf = &sol.nodes[1];
    let last = u.len() - 1;
    u[last].copy_from_slice(&leaf.value);
    ufield[last].copy_from_slice(&leaf.ufield);
    gamma[last].copy_from_slice(&leaf.gamma);
    let densities = root
        .density
        .chunks(nx)
        .map(|c| GridDensity::from_raw(grid.space, c.to_vec()))
        .collect();
    let flow = MeasureFlow {
        times: (k0..=grid.nt).map(|k| grid.time(k)).collect(),
        densities,
    };
    Mfg0Solution {
        grid: *grid,
        k0,
        u,
        flow,
        ufield,
        gamma,
        residual_history: sol.residual_history,
        equilibrium_cost: sol.root_cost,
    }
}

/// Central difference [𝒰⁰(s, ·, m₊) − 𝒰⁰(s, ·, m₋)] / (2δ), where m± project
/// the atoms of `m` moved by ±δ·direction.
#[allow(clippy::too_many_arguments)]
pub fn measure_derivative_direction(
    model: &ModelSpec,
    s: f64,
    m: &EmpiricalMeasure,
    direction: &[f64],
    delta: f64,
    grid: &SpaceTimeGrid,
    fp: &FixedPointConfig,
) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive (got {delta})")));
    }
    if direction.len() != m.len() || direction.iter().any(|d| !d.is_finite()) {
        return Err(Error::config("direction must be finite with one entry per atom"));
    }
    if direction.iter().all(|&d| d == 0.0) {
        return Ok(vec![0.0; grid.space.nx]);
    }
    let k = grid.index_of(s)?;
    if k >= grid.nt {
        return Err(Error::domain(format!("sub-game start s = {s} must lie in [0, T)")));
    }
    let moved = |sign: f64| -> Vec<f64> {
        m.atoms().iter().zip(direction).map(|(x, d)| x + sign * delta * d).collect()
    };
    let up = project_atoms(&moved(1.0), &grid.space)?.density;
    let down = project_atoms(&moved(-1.0), &grid.space)?.density;
    let (a, b) = rayon::join(
        || solve_from(model, grid, k, up.weights(), None, fp),
        || solve_from(model, grid, k, down.weights(), None, fp),
    );
    let (a, b) = (a?, b?);
    Ok(a.ufield[0]
        .iter()
        .zip(&b.ufield[0])
        .map(|(p, q)| (p - q) / (2.0 * delta))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq::solve_riccati;
    use crate::model::CostFamily;

    fn lq_setup(nx: usize, nt: usize) -> (ModelSpec, SpaceTimeGrid) {
        let g = Grid::new(-5.0, 7.0, nx).unwrap();
        let m0 = GridDensity::gaussian(g, 1.0, 0.5).unwrap();
        let model = ModelSpec::new(0.5, 0.0, 1.0, m0, CostFamily::Lq { q: 1.0, kappa: 0.5 }).unwrap();
        (model, SpaceTimeGrid::new(g, nt, 1.0).unwrap())
    }

    fn lq_error(sol: &Mfg0Solution) -> f64 {
        let r = solve_riccati(1.0, 0.5, 1.0, sol.grid.nt).unwrap();
        let mut err = 0.0f64;
        for (k, &t) in sol.times().iter().enumerate() {
            let mean = sol.mean(k);
            for (i, x) in sol.space().centers().iter().enumerate() {
                err = err.max((sol.ufield[k][i] - (r.a_at(t) * x + r.b_at(t) * mean)).abs());
            }
        }
        err
    }

    #[test]
    fn null_cost_gives_heat_flow() {
        let g = Grid::new(-4.0, 4.0, 80).unwrap();
        let m0 = GridDensity::gaussian(g, 0.0, 0.5).unwrap();
        let model = ModelSpec::new(0.4, 0.0, 1.0, m0, CostFamily::Null).unwrap();
        let grid = SpaceTimeGrid::new(g, 20, 1.0).unwrap();
        let sol = solve_mfg0(&model, &grid, &FixedPointConfig::default()).unwrap();
        assert!(sol.u.iter().flatten().all(|&v| v == 0.0));
        assert!(sol.ufield.iter().flatten().all(|&v| v == 0.0));
        assert!(sol.residual_history.len() <= 2);
        for d in &sol.flow.densities {
            assert!((d.total_mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn lq_matches_riccati() {
        let (model, grid) = lq_setup(400, 400);
        let sol = solve_mfg0(&model, &grid, &FixedPointConfig::default()).unwrap();
        assert!(sol.last_residual() <= 1e-8);
        let err = lq_error(&sol);
        assert!(err <= 5e-3, "sup error {err}");
        // terminal slice equals g_x(·, m_T)
        let mt = sol.flow.terminal().mean();
        for (i, x) in sol.space().centers().iter().enumerate() {
            let want = 0.5 * (x - 0.5 * mt).powi(2);
            assert!((sol.u[400][i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn subgame_at_zero_is_the_same_solve() {
        let (model, grid) = lq_setup(120, 40);
        let fp = FixedPointConfig::default();
        let sol = solve_mfg0(&model, &grid, &fp).unwrap();
        let (u0, _) = solve_subgame(&model, 0.0, &model.initial_law, &grid, &fp).unwrap();
        assert_eq!(u0, sol.ufield[0]);
        assert!(solve_subgame(&model, 1.0, &model.initial_law, &grid, &fp).is_err());
    }

    #[test]
    fn subgame_from_shifted_law() {
        let (model, grid) = lq_setup(300, 100);
        let r = solve_riccati(1.0, 0.5, 1.0, 100).unwrap();
        let m = GridDensity::gaussian(grid.space, 2.0, 0.5).unwrap();
        let s = 0.25;
        let (u, _) = solve_subgame(&model, s, &m, &grid, &FixedPointConfig::default()).unwrap();
        for (x, v) in grid.space.centers().iter().zip(&u) {
            assert!((v - (r.a_at(s) * x + r.b_at(s) * m.mean())).abs() < 5e-3);
        }
    }

    #[test]
    fn measure_derivative_in_lq_is_b() {
        let (model, grid) = lq_setup(200, 50);
        let fp = FixedPointConfig::default();
        let r = solve_riccati(1.0, 0.5, 1.0, 50).unwrap();
        let atoms: Vec<f64> = (0..400).map(|j| 1.0 + 0.5 * ((j as f64 + 0.5) / 400.0 - 0.5) * 3.0).collect();
        let m = EmpiricalMeasure::new(atoms).unwrap();
        let zero = measure_derivative_direction(&model, 0.2, &m, &vec![0.0; 400], 1e-2, &grid, &fp).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let d = measure_derivative_direction(&model, 0.2, &m, &vec![1.0; 400], 1e-2, &grid, &fp).unwrap();
        for v in &d {
            assert!((v - r.b_at(0.2)).abs() < 1e-2, "{v} vs {}", r.b_at(0.2));
        }
    }

    #[test]
    fn cache_round_trip() {
        let (model, grid) = lq_setup(60, 10);
        let sol = solve_mfg0(&model, &grid, &FixedPointConfig::default()).unwrap();
        let mut buf = Vec::new();
        sol.write_cache(&mut buf).unwrap();
        let back = Mfg0Solution::read_cache(buf.as_slice()).unwrap();
        assert_eq!(back, sol);
        assert!(Mfg0Solution::read_cache(&buf[..20]).is_err());
    }
}
