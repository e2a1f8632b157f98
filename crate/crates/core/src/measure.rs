//! Probability measures on the line: cell-mass densities on a grid and
//! equally weighted particle clouds, with the exact quantile-coupling
//! Wasserstein-2 distance between them.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::SeedStream;

/// Cell masses on a grid. Masses (not density values) so that conservation
/// checks are plain sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    grid: Grid,
    weights: Vec<f64>,
}

impl GridDensity {
    /// Validate, clip round-off negatives and renormalise.
    pub fn new(grid: Grid, mut weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.nx {
            return Err(Error::config(format!(
                "density has {} weights for a grid of {} cells",
                weights.len(),
                grid.nx
            )));
        }
        let mut total = 0.0;
        for (i, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() || *w < -1e-12 {
                return Err(Error::domain(format!("cell {i} has invalid mass {w}")));
            }
            if *w < 0.0 {
                *w = 0.0;
            }
            total += *w;
        }
        if !(total > 0.0) {
            return Err(Error::domain("density has zero total mass"));
        }
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self { grid, weights })
    }

    /// Wrap masses that are already non-negative and normalised (solver output).
    pub(crate) fn from_raw(grid: Grid, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), grid.nx);
        Self { grid, weights }
    }

    pub fn point_mass(grid: Grid, x: f64) -> Result<Self> {
        let i = grid.locate(x).round();
        if i < 0.0 || i as usize >= grid.nx {
            return Err(Error::domain(format!("point {x} outside grid")));
        }
        let mut w = vec![0.0; grid.nx];
        w[i as usize] = 1.0;
        Ok(Self { grid, weights: w })
    }

    /// Normal law restricted to the grid: exact cell probabilities, renormalised.
    pub fn gaussian(grid: Grid, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::config(format!("gaussian needs std > 0 (got {std})")));
        }
        let normal = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
        let h = grid.dx();
        let w = (0..grid.nx)
            .map(|i| {
                let a = grid.xmin + i as f64 * h;
                normal.cdf(a + h) - normal.cdf(a)
            })
            .collect();
        Self::new(grid, w)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.grid.center(i))
            .sum()
    }

    /// Same masses on a grid moved by `offset` (exact translation of the law).
    pub fn translated(&self, offset: f64) -> Self {
        Self {
            grid: self.grid.translated(offset),
            weights: self.weights.clone(),
        }
    }

    /// Mass in the `k` outermost cells on each side.
    pub fn boundary_mass(&self, k: usize) -> f64 {
        let n = self.weights.len();
        let k = k.min(n / 2);
        self.weights[..k].iter().sum::<f64>() + self.weights[n - k..].iter().sum::<f64>()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x_center,mass")?;
        for (i, w) in self.weights.iter().enumerate() {
            writeln!(out, "{},{}", self.grid.center(i), w)?;
        }
        Ok(())
    }
}

/// Equally weighted atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::domain("empirical measure needs at least one atom"));
        }
        if let Some(bad) = atoms.iter().find(|a| !a.is_finite()) {
            return Err(Error::domain(format!("non-finite atom {bad}")));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "atom")?;
        for a in &self.atoms {
            writeln!(out, "{a}")?;
        }
        Ok(())
    }
}

/// Borrowed view over either representation.
#[derive(Debug, Clone, Copy)]
pub enum MeasureRef<'a> {
    Grid(&'a GridDensity),
    Empirical(&'a EmpiricalMeasure),
}

impl<'a> From<&'a GridDensity> for MeasureRef<'a> {
    fn from(d: &'a GridDensity) -> Self {
        MeasureRef::Grid(d)
    }
}

impl<'a> From<&'a EmpiricalMeasure> for MeasureRef<'a> {
    fn from(e: &'a EmpiricalMeasure) -> Self {
        MeasureRef::Empirical(e)
    }
}

impl MeasureRef<'_> {
    pub fn mean(&self) -> f64 {
        match self {
            MeasureRef::Grid(d) => d.mean(),
            MeasureRef::Empirical(e) => e.mean(),
        }
    }
}

/// Time-indexed family of densities on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureFlow {
    pub times: Vec<f64>,
    pub densities: Vec<GridDensity>,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, densities: Vec<GridDensity>) -> Result<Self> {
        if times.len() != densities.len() || times.len() < 2 {
            return Err(Error::config("flow needs matching times and densities (at least two)"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("flow times must be strictly increasing"));
        }
        Ok(Self { times, densities })
    }

    pub fn terminal(&self) -> &GridDensity {
        self.densities.last().expect("non-empty flow")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub second_moment: f64,
}

/// Mean, variance and second moment; exact for atoms, midpoint rule on grids.
pub fn moments<'a>(m: impl Into<MeasureRef<'a>>) -> Moments {
    let (mean, second) = match m.into() {
        MeasureRef::Grid(d) => {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for (i, w) in d.weights.iter().enumerate() {
                let x = d.grid.center(i);
                s1 += w * x;
                s2 += w * x * x;
            }
            (s1, s2)
        }
        MeasureRef::Empirical(e) => {
            let n = e.atoms.len() as f64;
            let s1 = e.atoms.iter().sum::<f64>() / n;
            let s2 = e.atoms.iter().map(|a| a * a).sum::<f64>() / n;
            (s1, s2)
        }
    };
    Moments {
        mean,
        variance: (second - mean * mean).max(0.0),
        second_moment: second,
    }
}

/// Piece of a quantile function, linear in the quantile level on `[u0, u1]`.
#[derive(Debug, Clone, Copy)]
struct QuantilePiece {
    u0: f64,
    u1: f64,
    q0: f64,
    q1: f64,
}

impl QuantilePiece {
    #[inline]
    fn slope(&self) -> f64 {
        if self.u1 > self.u0 {
            (self.q1 - self.q0) / (self.u1 - self.u0)
        } else {
            0.0
        }
    }

    #[inline]
    fn at(&self, u: f64) -> f64 {
        self.q0 + self.slope() * (u - self.u0)
    }
}

fn grid_pieces(grid: &Grid, weights: &[f64]) -> Vec<QuantilePiece> {
    // mass of a cell is spread uniformly over the cell
    let total: f64 = weights.iter().sum();
    let h = grid.dx();
    let mut pieces = Vec::with_capacity(weights.len());
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        let left = grid.xmin + i as f64 * h;
        let u0 = cum / total;
        cum += w;
        pieces.push(QuantilePiece {
            u0,
            u1: cum / total,
            q0: left,
            q1: left + h,
        });
    }
    if let Some(last) = pieces.last_mut() {
        last.u1 = 1.0;
    }
    pieces
}

fn quantile_pieces(m: MeasureRef<'_>) -> Vec<QuantilePiece> {
    match m {
        MeasureRef::Grid(d) => grid_pieces(&d.grid, &d.weights),
        MeasureRef::Empirical(e) => {
            let mut atoms = e.atoms.clone();
            atoms.sort_by(f64::total_cmp);
            let n = atoms.len() as f64;
            let mut pieces: Vec<QuantilePiece> = Vec::with_capacity(atoms.len());
            for (j, a) in atoms.iter().enumerate() {
                pieces.push(QuantilePiece {
                    u0: j as f64 / n,
                    u1: (j + 1) as f64 / n,
                    q0: *a,
                    q1: *a,
                });
            }
            if let Some(last) = pieces.last_mut() {
                last.u1 = 1.0;
            }
            pieces
        }
    }
}

/// Exact one-dimensional Wasserstein-2 distance via the quantile coupling.
///
/// Both quantile functions are piecewise linear in the level `u`, so the
/// integral of their squared difference is summed in closed form over the
/// merged breakpoints.
pub fn wasserstein2<'a, 'b>(a: impl Into<MeasureRef<'a>>, b: impl Into<MeasureRef<'b>>) -> Result<f64> {
    let (a, b) = (a.into(), b.into());
    if let (MeasureRef::Grid(da), MeasureRef::Grid(db)) = (a, b) {
        if !da.grid.same_cells(&db.grid) {
            return Err(Error::config(format!(
                "grid densities live on different grids ({:?} vs {:?})",
                da.grid, db.grid
            )));
        }
    }
    let pa = quantile_pieces(a);
    let pb = quantile_pieces(b);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::domain("wasserstein2 of an empty measure"));
    }
    Ok(merge_distance(&pa, &pb))
}

/// W2 between two mass vectors on the same grid (solver-internal fast path).
pub(crate) fn w2_cells(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    merge_distance(&grid_pieces(grid, a), &grid_pieces(grid, b))
}

fn merge_distance(pa: &[QuantilePiece], pb: &[QuantilePiece]) -> f64 {
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut acc = 0.0f64;
    while i < pa.len() && j < pb.len() {
        let end = pa[i].u1.min(pb[j].u1);
        let len = end - u;
        if len > 0.0 {
            let d0 = pa[i].at(u) - pb[j].at(u);
            let d1 = pa[i].slope() - pb[j].slope();
            acc += len * (d0 * d0 + d0 * d1 * len + d1 * d1 * len * len / 3.0);
        }
        u = end;
        if pa[i].u1 <= end {
            i += 1;
        }
        if pb[j].u1 <= end {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Result of cloud-in-cell projection; `clamped` counts atoms pulled in from outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub density: GridDensity,
    pub clamped: usize,
}

/// Cloud-in-cell projection: each atom's mass is split linearly between the
/// two nearest cell centres.
pub fn project(e: &EmpiricalMeasure, grid: &Grid) -> Result<Projection> {
    project_atoms(e.atoms(), grid)
}

pub(crate) fn project_atoms(atoms: &[f64], grid: &Grid) -> Result<Projection> {
    let n = grid.nx;
    let mut w = vec![0.0; n];
    let mut clamped = 0usize;
    let unit = 1.0 / atoms.len() as f64;
    for &x in atoms {
        if x < grid.xmin || x > grid.xmax {
            clamped += 1;
        }
        deposit(&mut w, grid, x, unit);
    }
    if clamped == atoms.len() {
        return Err(Error::domain(format!(
            "all {} atoms lie outside [{}, {}]",
            atoms.len(),
            grid.xmin,
            grid.xmax
        )));
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(Projection {
        density: GridDensity::from_raw(*grid, w),
        clamped,
    })
}

#[inline]
pub(crate) fn deposit(w: &mut [f64], grid: &Grid, x: f64, mass: f64) {
    let n = w.len();
    let s = grid.locate(x);
    if s <= 0.0 {
        w[0] += mass;
    } else if s >= (n - 1) as f64 {
        w[n - 1] += mass;
    } else {
        let i = s.floor() as usize;
        let t = s - i as f64;
        w[i] += mass * (1.0 - t);
        w[i + 1] += mass * t;
    }
}

/// Inverse-CDF sampling of the right-continuous step CDF: atoms sit at cell centres.
pub fn sample(d: &GridDensity, n: usize, stream: SeedStream) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::config("sample size must be at least 1"));
    }
    let mut cum = Vec::with_capacity(d.weights.len());
    let mut s = 0.0;
    for w in &d.weights {
        s += w;
        cum.push(s);
    }
    let total = s;
    let mut rng = stream.rng();
    let atoms = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let i = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            d.grid.center(i)
        })
        .collect();
    EmpiricalMeasure::new(atoms)
}

/// Translate the mass by `dx` on the same grid with linear redistribution;
/// mass pushed past the ends accumulates in the end cells.
pub fn shift(d: &GridDensity, dx: f64) -> GridDensity {
    let n = d.weights.len();
    let steps = dx / d.grid.dx();
    let mut w = vec![0.0; n];
    for (i, &m) in d.weights.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let s = i as f64 + steps;
        if s <= 0.0 {
            w[0] += m;
        } else if s >= (n - 1) as f64 {
            w[n - 1] += m;
        } else {
            let j = s.floor() as usize;
            let t = s - j as f64;
            if t == 0.0 {
                w[j] += m;
            } else {
                w[j] += m * (1.0 - t);
                w[j + 1] += m * t;
            }
        }
    }
    GridDensity::from_raw(d.grid, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(-5.0, 7.0, 600).unwrap()
    }

    #[test]
    fn point_masses_distance_is_gap() {
        let a = EmpiricalMeasure::new(vec![0.0]).unwrap();
        let b = EmpiricalMeasure::new(vec![3.0]).unwrap();
        assert_eq!(wasserstein2(&a, &b).unwrap(), 3.0);
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn two_atom_example() {
        let a = EmpiricalMeasure::new(vec![0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::new(vec![1.0, 2.0]).unwrap();
        // couplings: identity pairing cost (1+1)/2 = 1, crossed pairing (4+0)/2 = 2
        assert!((wasserstein2(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_distance_identity_and_mismatch() {
        let d = GridDensity::gaussian(grid(), 1.0, 0.5).unwrap();
        assert_eq!(wasserstein2(&d, &d).unwrap(), 0.0);
        let other = GridDensity::gaussian(Grid::new(-5.0, 7.0, 300).unwrap(), 1.0, 0.5).unwrap();
        assert!(matches!(wasserstein2(&d, &other), Err(Error::Config { .. })));
    }

    #[test]
    fn translated_gaussians_distance_is_shift() {
        // W2 between a law and its translate is the translation length
        let g = grid();
        let a = GridDensity::gaussian(g, 0.0, 0.5).unwrap();
        let b = shift(&a, 10.0 * g.dx());
        assert!((wasserstein2(&a, &b).unwrap() - 10.0 * g.dx()).abs() < 1e-10);
    }

    #[test]
    fn moments_examples() {
        let m = moments(&EmpiricalMeasure::new(vec![2.0]).unwrap());
        assert_eq!((m.mean, m.variance, m.second_moment), (2.0, 0.0, 4.0));
        let m = moments(&EmpiricalMeasure::new(vec![-1.0, 1.0]).unwrap());
        assert_eq!((m.mean, m.variance, m.second_moment), (0.0, 1.0, 1.0));
        let m = moments(&GridDensity::gaussian(grid(), 1.0, 0.5).unwrap());
        assert!((m.mean - 1.0).abs() < 1e-3);
        assert!((m.variance - 0.25).abs() < 1e-3);
    }

    #[test]
    fn projection_cases() {
        let g = Grid::new(0.0, 10.0, 10).unwrap();
        let p = project(&EmpiricalMeasure::new(vec![g.center(3)]).unwrap(), &g).unwrap();
        assert_eq!(p.density.weights()[3], 1.0);
        let mid = 0.5 * (g.center(3) + g.center(4));
        let p = project(&EmpiricalMeasure::new(vec![mid]).unwrap(), &g).unwrap();
        assert!((p.density.weights()[3] - 0.5).abs() < 1e-15);
        assert!((p.density.weights()[4] - 0.5).abs() < 1e-15);
        let p = project(&EmpiricalMeasure::new(vec![-1.0, 5.0]).unwrap(), &g).unwrap();
        assert_eq!(p.clamped, 1);
        assert!(matches!(
            project(&EmpiricalMeasure::new(vec![-1.0, 11.0]).unwrap(), &g),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn projection_preserves_mass_and_mean() {
        let g = Grid::new(-3.0, 3.0, 37).unwrap();
        let atoms: Vec<f64> = (0..101).map(|i| -2.0 + 0.04 * i as f64 + 0.001 * (i as f64).sin()).collect();
        let e = EmpiricalMeasure::new(atoms).unwrap();
        let p = project(&e, &g).unwrap();
        assert!((p.density.total_mass() - 1.0).abs() < 1e-12);
        assert!((p.density.mean() - e.mean()).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_point_mass_degenerates() {
        let g = grid();
        let pm = GridDensity::point_mass(g, 1.3).unwrap();
        let s = sample(&pm, 50, SeedStream::new(3, 0)).unwrap();
        assert!(s.atoms().iter().all(|&a| a == s.atoms()[0]));
        let d = GridDensity::gaussian(g, 0.0, 1.0).unwrap();
        let a = sample(&d, 100, SeedStream::new(11, 2)).unwrap();
        let b = sample(&d, 100, SeedStream::new(11, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn large_sample_variance() {
        let d = GridDensity::gaussian(grid(), 0.0, 1.0).unwrap();
        let s = sample(&d, 100_000, SeedStream::new(5, 0)).unwrap();
        let m = moments(&s);
        assert!((m.variance - 1.0).abs() < 0.02, "{}", m.variance);
    }

    #[test]
    fn shift_cases() {
        let g = Grid::new(-4.0, 4.0, 80).unwrap();
        let d = GridDensity::gaussian(g, 0.0, 0.5).unwrap();
        assert_eq!(shift(&d, 0.0), d);
        let one = shift(&d, g.dx());
        for i in 1..78 {
            assert_eq!(one.weights()[i + 1], d.weights()[i]);
        }
        let back = shift(&one, -g.dx());
        for i in 0..80 {
            assert!((back.weights()[i] - d.weights()[i]).abs() < 1e-10);
        }
        let frac = shift(&d, 0.37 * g.dx());
        assert!((frac.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let g = Grid::new(0.0, 1.0, 4).unwrap();
        let d = GridDensity::new(g, vec![0.25; 4]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x_center,mass\n0.125,0.25\n"));
    }
}
