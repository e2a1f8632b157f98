//! Mean field game with common noise on a non-recombining binomial tree.
//!
//! Each coarse step of length T/D ends with a common jump ±√(T/D), scaled by
//! ε. Common noise moves every player and the whole population together, so
//! each node works in frame coordinates y = x − o, where o = ε W̃ is the
//! node's accumulated common shift: in the frame the conditional law does not
//! jump, siblings start from their parent's end density, and the parent's end
//! value is the plain average of its children's start values. Only the
//! terminal cost sees the offset, through g(y + o, m̄ + o).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SpaceTimeGrid};
use crate::measure::{w2_cells, GridDensity};
use crate::model::{MeanFieldCost, ModelSpec};
use crate::numerics::{gradient, hermite, laplacian};
use crate::pde::{HamiltonianScheme, Kernels};
use crate::rng::SeedStream;

/// Largest tree depth accepted, and the float budget for node storage.
pub const MAX_DEPTH: usize = 12;
const FLOAT_BUDGET: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub scheme: HamiltonianScheme,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iters: 200,
            scheme: HamiltonianScheme::Linearized,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config(format!("damping must lie in (0, 1] (got {})", self.damping)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::config("fixed point needs tol > 0 and max_iters >= 1"));
        }
        Ok(())
    }
}

/// Shape of the binomial common-noise tree: `depth` coarse steps of
/// `substeps` PDE steps each. Nodes are numbered heap-style: the children of
/// `i` are `2i + 1` (up jump) and `2i + 2` (down jump).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonNoiseTree {
    pub depth: usize,
    pub substeps: usize,
}

impl CommonNoiseTree {
    pub fn new(depth: usize, substeps: usize) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::config(format!("tree depth {depth} exceeds the cap {MAX_DEPTH}")));
        }
        if substeps == 0 {
            return Err(Error::config("tree needs at least one substep per coarse step"));
        }
        Ok(Self { depth, substeps })
    }

    pub fn node_count(&self) -> usize {
        (1usize << (self.depth + 1)) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.depth
    }

    /// Node index range at depth `d`.
    pub fn level(&self, d: usize) -> std::ops::Range<usize> {
        ((1usize << d) - 1)..((1usize << (d + 1)) - 1)
    }

    pub fn depth_of(&self, node: usize) -> usize {
        (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.depth_of(node) == self.depth
    }

    pub fn children(node: usize) -> (usize, usize) {
        (2 * node + 1, 2 * node + 2)
    }

    /// Net number of up jumps on the path from the root.
    pub fn net_ups(node: usize) -> i64 {
        let mut i = node;
        let mut net = 0i64;
        while i > 0 {
            net += if i % 2 == 1 { 1 } else { -1 };
            i = (i - 1) / 2;
        }
        net
    }

    /// Sign (+1 up, −1 down) of each jump on the path to `node`, root first.
    pub fn jump_signs(node: usize) -> Vec<f64> {
        let mut signs = Vec::new();
        let mut i = node;
        while i > 0 {
            signs.push(if i % 2 == 1 { 1.0 } else { -1.0 });
            i = (i - 1) / 2;
        }
        signs.reverse();
        signs
    }

    /// Leaf reached by following `signs` from `node`.
    pub fn descend(node: usize, up: bool) -> usize {
        if up {
            2 * node + 1
        } else {
            2 * node + 2
        }
    }

    pub fn coarse_dt(&self, span: f64) -> f64 {
        span / self.depth.max(1) as f64
    }

    fn check_budget(&self, nx: usize) -> Result<()> {
        let floats = self.node_count() * (self.substeps + 1) * nx * 4;
        if floats > FLOAT_BUDGET {
            return Err(Error::config(format!(
                "tree with depth {} and {} substeps on {} cells needs {} floats (budget {})",
                self.depth, self.substeps, nx, floats, FLOAT_BUDGET
            )));
        }
        Ok(())
    }
}

/// Per-node data in frame coordinates. Internal nodes hold `substeps + 1`
/// slices (start ..= end of their coarse step), leaves a single terminal slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub offset: f64,
    pub density: Vec<f64>,
    pub value: Vec<f64>,
    /// ∂ₓ of the value (the decoupling field), per slice.
    pub ufield: Vec<f64>,
    /// ∂ₓₓ of the value, per slice.
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSolution {
    pub grid: Grid,
    pub tree: CommonNoiseTree,
    pub t0: f64,
    pub dt: f64,
    pub eps: f64,
    pub nodes: Vec<TreeNode>,
    /// Expected equilibrium cost E[∫ α²/2 dt + g(X_T, m_T)] by grid quadrature.
    pub root_cost: f64,
    pub residual_history: Vec<f64>,
}

impl TreeSolution {
    pub fn nx(&self) -> usize {
        self.grid.nx
    }

    pub fn slices(&self, node: usize) -> usize {
        if self.tree.is_leaf(node) {
            1
        } else {
            self.tree.substeps + 1
        }
    }

    pub fn time(&self, node: usize, slice: usize) -> f64 {
        let k = self.tree.depth_of(node) * self.tree.substeps + slice;
        self.t0 + k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.t0 + (self.tree.depth * self.tree.substeps) as f64 * self.dt
    }

    fn row<'a>(&self, data: &'a [f64], slice: usize) -> &'a [f64] {
        let n = self.grid.nx;
        &data[slice * n..(slice + 1) * n]
    }

    pub fn density_slice(&self, node: usize, slice: usize) -> &[f64] {
        self.row(&self.nodes[node].density, slice)
    }

    pub fn value_slice(&self, node: usize, slice: usize) -> &[f64] {
        self.row(&self.nodes[node].value, slice)
    }

    pub fn ufield_slice(&self, node: usize, slice: usize) -> &[f64] {
        self.row(&self.nodes[node].ufield, slice)
    }

    pub fn gamma_slice(&self, node: usize, slice: usize) -> &[f64] {
        self.row(&self.nodes[node].gamma, slice)
    }

    /// Conditional law at (node, slice) in absolute coordinates.
    pub fn density(&self, node: usize, slice: usize) -> GridDensity {
        GridDensity::from_raw(self.grid, self.density_slice(node, slice).to_vec()).translated(self.nodes[node].offset)
    }

    pub fn conditional_mean(&self, node: usize, slice: usize) -> f64 {
        frame_mean(&self.grid, self.density_slice(node, slice)) + self.nodes[node].offset
    }

    /// Decoupling field 𝒰^ε and its x-derivative at absolute position `x`.
    #[inline]
    pub fn decoupling(&self, node: usize, slice: usize, x: f64) -> (f64, f64) {
        hermite(
            &self.grid,
            self.ufield_slice(node, slice),
            self.gamma_slice(node, slice),
            x - self.nodes[node].offset,
        )
    }

    /// Optimal feedback −𝒰^ε at the root's initial time.
    pub fn root_feedback(&self, x: f64) -> f64 {
        -self.decoupling(0, 0, x).0
    }

    /// Terminal conditional means of the population, one per leaf (absolute).
    pub fn frozen_flow(&self) -> FrozenFlow {
        let leaves = self.tree.level(self.tree.depth);
        FrozenFlow {
            tree: self.tree,
            eps: self.eps,
            leaf_means: leaves.map(|i| self.conditional_mean(i, 0)).collect(),
        }
    }

    pub fn last_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }

    /// Rows `node,depth,slice,t,offset,mean`: the conditional mean flow.
    pub fn write_means_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "node,depth,slice,t,offset,mean")?;
        for node in 0..self.nodes.len() {
            for slice in 0..self.slices(node) {
                writeln!(
                    out,
                    "{node},{},{slice},{},{},{}",
                    self.tree.depth_of(node),
                    self.time(node, slice),
                    self.nodes[node].offset,
                    self.conditional_mean(node, slice)
                )?;
            }
        }
        Ok(())
    }

    /// Rows `t,x,u,ufield,gamma,density` along one node, in absolute coordinates.
    pub fn write_node_csv<W: std::io::Write>(&self, node: usize, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,u,ufield,gamma,density")?;
        let o = self.nodes[node].offset;
        for slice in 0..self.slices(node) {
            let t = self.time(node, slice);
            let (v, u, g, m) = (
                self.value_slice(node, slice),
                self.ufield_slice(node, slice),
                self.gamma_slice(node, slice),
                self.density_slice(node, slice),
            );
            for i in 0..self.grid.nx {
                writeln!(out, "{t},{},{},{},{},{}", self.grid.center(i) + o, v[i], u[i], g[i], m[i])?;
            }
        }
        Ok(())
    }
}

/// A population frozen along the tree. The built-in costs see the population
/// only through its terminal conditional mean, so one number per leaf suffices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenFlow {
    pub tree: CommonNoiseTree,
    pub eps: f64,
    pub leaf_means: Vec<f64>,
}

pub(crate) fn frame_mean(grid: &Grid, w: &[f64]) -> f64 {
    w.iter().enumerate().map(|(i, m)| m * grid.center(i)).sum()
}

/// The solver proper, shared by the ε = 0 game (depth 0), sub-games and the
/// full tree so that all of them run exactly the same arithmetic.
pub(crate) struct Engine<'a> {
    pub model: &'a ModelSpec,
    pub grid: Grid,
    pub tree: CommonNoiseTree,
    pub t0: f64,
    pub dt: f64,
    pub eps: f64,
    pub fp: FixedPointConfig,
    pub offsets: Vec<f64>,
}

type Slices = Vec<Vec<f64>>;

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a ModelSpec,
        grid: Grid,
        tree: CommonNoiseTree,
        t0: f64,
        dt: f64,
        eps: f64,
        fp: FixedPointConfig,
    ) -> Result<Self> {
        fp.validate()?;
        tree.check_budget(grid.nx)?;
        let jump = eps * (tree.substeps as f64 * dt).sqrt();
        let offsets = (0..tree.node_count())
            .map(|i| jump * CommonNoiseTree::net_ups(i) as f64)
            .collect();
        Ok(Self {
            model,
            grid,
            tree,
            t0,
            dt,
            eps,
            fp,
            offsets,
        })
    }

    fn kernels(&self) -> Kernels {
        Kernels::new(self.grid, self.dt, self.model.sigma, self.fp.scheme)
    }

    fn slices(&self, node: usize) -> usize {
        if self.tree.is_leaf(node) {
            1
        } else {
            self.tree.substeps + 1
        }
    }

    pub fn zeros(&self) -> Slices {
        (0..self.tree.node_count())
            .map(|i| vec![0.0; self.slices(i) * self.grid.nx])
            .collect()
    }

    pub fn leaf_means(&self, dens: &Slices) -> Vec<f64> {
        self.tree
            .level(self.tree.depth)
            .map(|i| frame_mean(&self.grid, &dens[i]) + self.offsets[i])
            .collect()
    }

    /// Backward sweep from terminal values g(y + o, leaf mean).
    pub fn backward(&self, leaf_means: &[f64], values: &mut Slices) -> Result<()> {
        let n = self.grid.nx;
        let k = self.tree.substeps;
        let depth = self.tree.depth;
        let lo = self.tree.level(depth).start;
        values[lo..].par_iter_mut().enumerate().for_each(|(j, v)| {
            self.model
                .terminal_values(&self.grid, self.offsets[lo + j], leaf_means[j], v);
        });
        for d in (0..depth).rev() {
            let range = self.tree.level(d);
            let (head, tail) = values.split_at_mut(range.end);
            let children: &[Vec<f64>] = tail;
            let base = range.end;
            head[range.start..]
                .par_iter_mut()
                .enumerate()
                .try_for_each_init(
                    || self.kernels(),
                    |ker, (j, v)| -> Result<()> {
                        let i = range.start + j;
                        let (c1, c2) = CommonNoiseTree::children(i);
                        let (a, b) = (&children[c1 - base][..n], &children[c2 - base][..n]);
                        for (x, out) in v[k * n..(k + 1) * n].iter_mut().enumerate() {
                            *out = 0.5 * (a[x] + b[x]);
                        }
                        for s in (0..k).rev() {
                            let (left, right) = v.split_at_mut((s + 1) * n);
                            ker.hjb_step(&right[..n], &mut left[s * n..])?;
                        }
                        Ok(())
                    },
                )?;
        }
        Ok(())
    }

    /// Forward density push under the feedback of `values`, starting from `m0`.
    pub fn forward(&self, m0: &[f64], values: &Slices, dens: &mut Slices) {
        let n = self.grid.nx;
        let k = self.tree.substeps;
        dens[0][..n].copy_from_slice(m0);
        for d in 0..self.tree.depth {
            let range = self.tree.level(d);
            dens[range.clone()]
                .par_iter_mut()
                .zip(&values[range.clone()])
                .for_each_init(
                    || self.kernels(),
                    |ker, (m, v)| {
                        for s in 0..k {
                            let (left, right) = m.split_at_mut((s + 1) * n);
                            ker.fp_step(&left[s * n..], &v[s * n..(s + 1) * n], &mut right[..n]);
                        }
                    },
                );
            let (head, tail) = dens.split_at_mut(range.end);
            let parents: &[Vec<f64>] = head;
            let next = self.tree.level(d + 1);
            tail[..next.len()].par_iter_mut().enumerate().for_each(|(j, child)| {
                let parent = (next.start + j - 1) / 2;
                child[..n].copy_from_slice(&parents[parent][k * n..(k + 1) * n]);
            });
        }
    }

    /// `dens ← (1 − λ) dens + λ phi`; returns the largest per-slice W2 move.
    fn damp(&self, dens: &mut Slices, phi: &Slices) -> f64 {
        let n = self.grid.nx;
        let lam = self.fp.damping;
        dens.par_iter_mut()
            .zip(phi)
            .enumerate()
            .map_init(
                || vec![0.0; n],
                |old, (i, (m, p))| {
                    let mut worst = 0.0f64;
                    for (s, (ms, ps)) in m.chunks_mut(n).zip(p.chunks(n)).enumerate() {
                        if i == 0 && s == 0 {
                            continue;
                        }
                        old.copy_from_slice(ms);
                        for (a, b) in ms.iter_mut().zip(ps) {
                            *a = (1.0 - lam) * *a + lam * b;
                        }
                        worst = worst.max(w2_cells(&self.grid, ms, old));
                    }
                    worst
                },
            )
            .reduce(|| 0.0, f64::max)
    }

    /// Damped Picard iteration on the node densities; returns (densities, values, residuals).
    pub fn solve(&self, m0: &[f64], warm: Option<Slices>) -> Result<(Slices, Slices, Vec<f64>)> {
        let mut values = self.zeros();
        let mut dens = match warm {
            Some(w) => w,
            None => {
                let mut d = self.zeros();
                self.forward(m0, &values, &mut d);
                let last = &d[self.tree.level(self.tree.depth).start];
                let edge = last[0] + last[self.grid.nx - 1];
                if edge > 1e-8 {
                    return Err(Error::config(format!(
                        "domain [{}, {}] too narrow: the heat-spread initial law leaves {edge:.2e} mass in the end cells",
                        self.grid.xmin, self.grid.xmax
                    )));
                }
                d
            }
        };
        dens[0][..self.grid.nx].copy_from_slice(m0);
        let mut phi = self.zeros();
        let mut residuals = Vec::new();
        let mut converged = false;
        for _ in 0..self.fp.max_iters {
            let means = self.leaf_means(&dens);
            self.backward(&means, &mut values)?;
            self.forward(m0, &values, &mut phi);
            let r = self.damp(&mut dens, &phi);
            residuals.push(r);
            if r <= self.fp.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Convergence {
                iterations: residuals.len(),
                last: residuals.last().copied().unwrap_or(f64::NAN),
                residuals,
                context: String::new(),
            });
        }
        let means = self.leaf_means(&dens);
        self.backward(&means, &mut values)?;
        Ok((dens, values, residuals))
    }

    /// Assemble a solution, computing derived fields and the equilibrium cost.
    pub fn package(&self, dens: Slices, values: Slices, residuals: Vec<f64>) -> TreeSolution {
        let n = self.grid.nx;
        let h = self.grid.dx();
        let nodes: Vec<TreeNode> = dens
            .into_par_iter()
            .zip(values)
            .enumerate()
            .map(|(i, (density, value))| {
                let mut ufield = vec![0.0; value.len()];
                let mut gamma = vec![0.0; value.len()];
                for ((v, u), g) in value.chunks(n).zip(ufield.chunks_mut(n)).zip(gamma.chunks_mut(n)) {
                    gradient(v, h, u);
                    laplacian(v, h, g);
                }
                TreeNode {
                    offset: self.offsets[i],
                    density,
                    value,
                    ufield,
                    gamma,
                }
            })
            .collect();
        let mut sol = TreeSolution {
            grid: self.grid,
            tree: self.tree,
            t0: self.t0,
            dt: self.dt,
            eps: self.eps,
            nodes,
            root_cost: 0.0,
            residual_history: residuals,
        };
        sol.root_cost = self.equilibrium_cost(&sol);
        sol
    }

    /// Σ_nodes P(node) Σ_k Δt Σ_i ½ 𝒰² m  +  Σ_leaves P(leaf) Σ_i g m.
    fn equilibrium_cost(&self, sol: &TreeSolution) -> f64 {
        let n = self.grid.nx;
        let k = self.tree.substeps;
        let parts: Vec<f64> = (0..self.tree.node_count())
            .into_par_iter()
            .map(|i| {
                let p = 0.5f64.powi(self.tree.depth_of(i) as i32);
                let node = &sol.nodes[i];
                if self.tree.is_leaf(i) {
                    let mean = frame_mean(&self.grid, &node.density) + node.offset;
                    let g: f64 = (0..n)
                        .map(|x| self.model.cost.g(self.grid.center(x) + node.offset, mean) * node.density[x])
                        .sum();
                    p * g
                } else {
                    let mut run = 0.0;
                    for s in 0..k {
                        let u = &node.ufield[s * n..(s + 1) * n];
                        let m = &node.density[s * n..(s + 1) * n];
                        run += u.iter().zip(m).map(|(u, m)| 0.5 * u * u * m).sum::<f64>();
                    }
                    p * run * self.dt
                }
            })
            .collect();
        parts.iter().sum()
    }
}

fn check_grid(model: &ModelSpec, grid: &SpaceTimeGrid) -> Result<()> {
    if !model.initial_law.grid().same_cells(&grid.space) {
        return Err(Error::config("initial law must live on the solver grid"));
    }
    if (grid.horizon - model.horizon).abs() > 1e-12 {
        return Err(Error::config(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon, model.horizon
        )));
    }
    Ok(())
}

fn check_tree(tree: &CommonNoiseTree, grid: &SpaceTimeGrid) -> Result<()> {
    if tree.depth * tree.substeps != grid.nt {
        return Err(Error::config(format!(
            "tree depth {} times substeps {} must equal nt = {}",
            tree.depth, tree.substeps, grid.nt
        )));
    }
    Ok(())
}

/// Solve the game with common noise of intensity `model.eps` on the tree.
pub fn solve_eps_mfg(
    model: &ModelSpec,
    tree: CommonNoiseTree,
    grid: &SpaceTimeGrid,
    fp: &FixedPointConfig,
) -> Result<TreeSolution> {
    check_grid(model, grid)?;
    check_tree(&tree, grid)?;
    let engine = Engine::new(model, grid.space, tree, 0.0, grid.dt(), model.eps, *fp)?;
    let (d, v, r) = engine
        .solve(model.initial_law.weights(), None)
        .map_err(|e| e.context(format!("tree solve at eps = {}", model.eps)))?;
    Ok(engine.package(d, v, r))
}

/// Tree game restarted at coarse time `t` from the law `m` (the decoupling
/// field 𝒰^ε(t, ·, m) is the root's first ufield slice).
pub fn solve_eps_subgame(
    model: &ModelSpec,
    tree: CommonNoiseTree,
    grid: &SpaceTimeGrid,
    t: f64,
    m: &GridDensity,
    fp: &FixedPointConfig,
) -> Result<TreeSolution> {
    check_tree(&tree, grid)?;
    if !m.grid().same_cells(&grid.space) {
        return Err(Error::config("sub-game law must live on the solver grid"));
    }
    let k = grid.index_of(t)?;
    if k % tree.substeps != 0 || k >= grid.nt {
        return Err(Error::domain(format!("t = {t} is not a coarse node strictly before T")));
    }
    let sub = CommonNoiseTree::new(tree.depth - k / tree.substeps, tree.substeps)?;
    let engine = Engine::new(model, grid.space, sub, grid.time(k), grid.dt(), model.eps, *fp)?;
    let (d, v, r) = engine
        .solve(m.weights(), None)
        .map_err(|e| e.context(format!("tree sub-game at t = {t}, eps = {}", model.eps)))?;
    Ok(engine.package(d, v, r))
}

/// Feedback strategy on the tree in frame coordinates: cell controls for the
/// running cost and face velocities for the density push, per internal node
/// and substep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStrategy {
    pub tree: CommonNoiseTree,
    pub nx: usize,
    pub controls: Vec<Vec<f64>>,
    pub faces: Vec<Vec<f64>>,
}

impl FeedbackStrategy {
    /// The feedback −∂ₓv generated by a family of value functions.
    pub fn from_values(sol: &TreeSolution) -> Self {
        let n = sol.nx();
        let h = sol.grid.dx();
        let k = sol.tree.substeps;
        let internal = sol.tree.node_count() - sol.tree.leaf_count();
        let mut controls = Vec::with_capacity(internal);
        let mut faces = Vec::with_capacity(internal);
        for i in 0..internal {
            let node = &sol.nodes[i];
            controls.push(node.ufield[..k * n].iter().map(|u| -u).collect());
            let mut f = Vec::with_capacity(k * (n - 1));
            for s in 0..k {
                let v = &node.value[s * n..(s + 1) * n];
                f.extend((0..n - 1).map(|x| -(v[x + 1] - v[x]) / h));
            }
            faces.push(f);
        }
        Self {
            tree: sol.tree,
            nx: n,
            controls,
            faces,
        }
    }

    /// Arbitrary cell controls (per internal node, `substeps × nx`); faces average neighbours.
    pub fn from_controls(tree: CommonNoiseTree, nx: usize, controls: Vec<Vec<f64>>) -> Result<Self> {
        let internal = tree.node_count() - tree.leaf_count();
        if controls.len() != internal || controls.iter().any(|c| c.len() != tree.substeps * nx) {
            return Err(Error::config(format!(
                "strategy needs {internal} nodes of {} values",
                tree.substeps * nx
            )));
        }
        let faces = controls
            .iter()
            .map(|c| {
                c.chunks(nx)
                    .flat_map(|row| (0..nx - 1).map(move |x| 0.5 * (row[x] + row[x + 1])))
                    .collect()
            })
            .collect();
        Ok(Self {
            tree,
            nx,
            controls,
            faces,
        })
    }

    pub fn constant(tree: CommonNoiseTree, nx: usize, alpha: f64) -> Self {
        let internal = tree.node_count() - tree.leaf_count();
        Self {
            tree,
            nx,
            controls: vec![vec![alpha; tree.substeps * nx]; internal],
            faces: vec![vec![alpha; tree.substeps * (nx - 1)]; internal],
        }
    }
}

/// Player strategies accepted by [`evaluate_cost`].
#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    Feedback(&'a FeedbackStrategy),
    OpenLoop(&'a OpenLoopPaths),
}

/// Expected cost of `strategy` against the frozen population `flow`.
///
/// Feedback strategies are evaluated by pushing the player's law through each
/// node and integrating the running cost on the grid; open-loop ensembles by
/// averaging over leaves (probability 2^−D each) and particles.
pub fn evaluate_cost(
    model: &ModelSpec,
    grid: &SpaceTimeGrid,
    flow: &FrozenFlow,
    strategy: Strategy<'_>,
) -> Result<f64> {
    check_tree(&flow.tree, grid)?;
    match strategy {
        Strategy::Feedback(fs) => feedback_cost(model, grid, flow, fs),
        Strategy::OpenLoop(ol) => ol.cost(model, flow),
    }
}

fn feedback_cost(model: &ModelSpec, grid: &SpaceTimeGrid, flow: &FrozenFlow, fs: &FeedbackStrategy) -> Result<f64> {
    let tree = flow.tree;
    if fs.tree != tree || fs.nx != grid.space.nx {
        return Err(Error::config("strategy shape does not match the tree and grid"));
    }
    if flow.leaf_means.len() != tree.leaf_count() {
        return Err(Error::config("frozen flow has the wrong number of leaves"));
    }
    let engine = Engine::new(model, grid.space, tree, 0.0, grid.dt(), flow.eps, FixedPointConfig::default())?;
    let n = grid.space.nx;
    let k = tree.substeps;
    let mut dens = engine.zeros();
    dens[0][..n].copy_from_slice(model.initial_law.weights());
    let mut running = vec![0.0; tree.node_count()];
    for d in 0..tree.depth {
        let range = tree.level(d);
        dens[range.clone()]
            .par_iter_mut()
            .zip(running[range.clone()].par_iter_mut())
            .enumerate()
            .for_each_init(
                || engine.kernels(),
                |ker, (j, (m, run))| {
                    let i = range.start + j;
                    let mut acc = 0.0;
                    for s in 0..k {
                        let a = &fs.controls[i][s * n..(s + 1) * n];
                        acc += a.iter().zip(&m[s * n..(s + 1) * n]).map(|(a, m)| 0.5 * a * a * m).sum::<f64>();
                        let (left, right) = m.split_at_mut((s + 1) * n);
                        ker.fp_step_faces(&left[s * n..], &fs.faces[i][s * (n - 1)..(s + 1) * (n - 1)], &mut right[..n]);
                    }
                    *run = acc * engine.dt;
                },
            );
        let (head, tail) = dens.split_at_mut(range.end);
        let next = tree.level(d + 1);
        for (j, child) in tail[..next.len()].iter_mut().enumerate() {
            let parent = (next.start + j - 1) / 2;
            child[..n].copy_from_slice(&head[parent][k * n..(k + 1) * n]);
        }
    }
    let leaves = tree.level(tree.depth);
    let mut total = 0.0;
    for i in 0..tree.node_count() {
        let p = 0.5f64.powi(tree.depth_of(i) as i32);
        if tree.is_leaf(i) {
            let o = engine.offsets[i];
            let mean = flow.leaf_means[i - leaves.start];
            let g: f64 = (0..n).map(|x| model.cost.g(grid.space.center(x) + o, mean) * dens[i][x]).sum();
            total += p * g;
        } else {
            total += p * running[i];
        }
    }
    Ok(total)
}

/// Open-loop particle ensemble aligned with the tree: each particle follows
/// one branch (`leaf` is the heap index of its leaf) with control path
/// `alpha` (row-major `n × nt`) and terminal state `x_terminal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopPaths {
    pub dt: f64,
    pub leaf: Vec<usize>,
    pub alpha: Vec<f64>,
    pub x_terminal: Vec<f64>,
}

impl OpenLoopPaths {
    /// Particles are averaged within each leaf, leaves weighted 2^−D.
    fn cost(&self, model: &ModelSpec, flow: &FrozenFlow) -> Result<f64> {
        let tree = flow.tree;
        let n = self.leaf.len();
        let nt = tree.depth * tree.substeps;
        if n == 0 || self.alpha.len() != n * nt || self.x_terminal.len() != n {
            return Err(Error::config("open-loop ensemble has inconsistent shapes"));
        }
        let leaves = tree.level(tree.depth);
        let mut sum = vec![0.0; leaves.len()];
        let mut count = vec![0usize; leaves.len()];
        for j in 0..n {
            if !leaves.contains(&self.leaf[j]) {
                return Err(Error::config(format!("particle {j} is not on a leaf")));
            }
            let l = self.leaf[j] - leaves.start;
            let run: f64 = self.alpha[j * nt..(j + 1) * nt].iter().map(|a| 0.5 * a * a).sum::<f64>() * self.dt;
            sum[l] += run + model.cost.g(self.x_terminal[j], flow.leaf_means[l]);
            count[l] += 1;
        }
        if count.contains(&0) {
            return Err(Error::config("open-loop ensemble leaves some branches empty"));
        }
        let p = 1.0 / leaves.len() as f64;
        Ok(sum.iter().zip(&count).map(|(s, &c)| p * s / c as f64).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    /// inf over strategies of the expected cost against the frozen flow.
    pub value: f64,
    /// Value functions, optimal feedback fields and the law of a best-responding player.
    pub solution: TreeSolution,
}

/// Single backward sweep against a frozen population, then a forward push of
/// the best-responding player's law.
pub fn best_response(model: &ModelSpec, flow: &FrozenFlow, grid: &SpaceTimeGrid) -> Result<BestResponse> {
    check_tree(&flow.tree, grid)?;
    let engine = Engine::new(model, grid.space, flow.tree, 0.0, grid.dt(), flow.eps, FixedPointConfig::default())?;
    let mut values = engine.zeros();
    engine.backward(&flow.leaf_means, &mut values)?;
    let mut dens = engine.zeros();
    engine.forward(model.initial_law.weights(), &values, &mut dens);
    let value: f64 = values[0][..grid.space.nx]
        .iter()
        .zip(model.initial_law.weights())
        .map(|(v, m)| v * m)
        .sum();
    let solution = engine.package(dens, values, Vec::new());
    Ok(BestResponse { value, solution })
}

/// Particle paths simulated under the tree feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsPaths {
    pub times: Vec<f64>,
    /// Row-major `n × (nt + 1)`.
    pub x: Vec<f64>,
    /// 𝒰^ε along the path (the adjoint Y^ε); the last column is ∂ₓg(X_T, m_T).
    pub y: Vec<f64>,
    pub leaf: Vec<usize>,
}

impl EpsPaths {
    pub fn len(&self) -> usize {
        self.leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf.is_empty()
    }

    pub fn path(&self, j: usize) -> &[f64] {
        let w = self.times.len();
        &self.x[j * w..(j + 1) * w]
    }
}

/// Euler–Maruyama paths under −𝒰^ε: initial states drawn from the initial
/// law, one uniformly random branch per particle, independent individual noise.
pub fn sample_eps_paths(sol: &TreeSolution, model: &ModelSpec, n: usize, stream: SeedStream) -> Result<EpsPaths> {
    use crate::rng::tags;
    use rand::Rng;
    if n == 0 {
        return Err(Error::config("need at least one particle"));
    }
    let x0 = crate::measure::sample(&model.initial_law, n, stream.child(tags::INITIAL, 0))?;
    let mut rng = stream.child(tags::BRANCH, 0).rng();
    let leaves = sol.tree.level(sol.tree.depth);
    let branch: Vec<usize> = (0..n).map(|_| leaves.start + rng.random_range(0..leaves.len())).collect();
    Ok(simulate_paths(sol, model, x0.atoms(), &branch, Some(stream)))
}

/// Paths from given starting points along given leaves; `stream = None` switches off individual noise.
pub fn simulate_paths(
    sol: &TreeSolution,
    model: &ModelSpec,
    x0: &[f64],
    leaves: &[usize],
    stream: Option<SeedStream>,
) -> EpsPaths {
    use crate::rng::{brownian_increments, tags};
    let nt = sol.tree.depth * sol.tree.substeps;
    let dw = match stream {
        Some(s) => brownian_increments(s, tags::INDIVIDUAL, x0.len(), nt, sol.dt),
        None => vec![0.0; x0.len() * nt],
    };
    simulate_paths_with(sol, model, x0, leaves, &dw)
}

/// Paths driven by given individual increments (`n × nt`, row-major by particle).
pub fn simulate_paths_with(sol: &TreeSolution, model: &ModelSpec, x0: &[f64], leaves: &[usize], dw: &[f64]) -> EpsPaths {
    let k = sol.tree.substeps;
    let nt = sol.tree.depth * k;
    let n = x0.len();
    assert_eq!(dw.len(), n * nt, "increments must be n × nt");
    assert_eq!(leaves.len(), n, "one leaf per particle");
    let jump = sol.eps * (k as f64 * sol.dt).sqrt();
    let w = nt + 1;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let signs = CommonNoiseTree::jump_signs(leaves[j]);
            let mut xs = Vec::with_capacity(w);
            let mut ys = Vec::with_capacity(w);
            let mut x = x0[j];
            let mut node = 0usize;
            for (d, &sgn) in signs.iter().enumerate() {
                for s in 0..k {
                    let y = sol.decoupling(node, s, x).0;
                    xs.push(x);
                    ys.push(y);
                    x += -y * sol.dt + model.sigma * dw[j * nt + d * k + s];
                }
                x += jump * sgn;
                node = CommonNoiseTree::descend(node, sgn > 0.0);
            }
            xs.push(x);
            ys.push(model.cost.gx(x, sol.conditional_mean(node, 0)));
            (xs, ys)
        })
        .collect();
    let mut x = Vec::with_capacity(n * w);
    let mut y = Vec::with_capacity(n * w);
    for (xs, ys) in rows {
        x.extend(xs);
        y.extend(ys);
    }
    EpsPaths {
        times: (0..=nt).map(|k| sol.t0 + k as f64 * sol.dt).collect(),
        x,
        y,
        leaf: leaves.to_vec(),
    }
}
