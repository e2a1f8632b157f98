//! Cell-centred spatial grids and uniform time grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition of `[xmin, xmax]` into `nx` cells; values live at cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub xmin: f64,
    pub xmax: f64,
    pub nx: usize,
}

impl Grid {
    pub fn new(xmin: f64, xmax: f64, nx: usize) -> Result<Self> {
        if !(xmin.is_finite() && xmax.is_finite()) || xmax <= xmin {
            return Err(Error::config(format!(
                "grid bounds must be finite with xmin < xmax (got [{xmin}, {xmax}])"
            )));
        }
        if nx < 4 {
            return Err(Error::config(format!("grid needs at least 4 cells (got {nx})")));
        }
        Ok(Self { xmin, xmax, nx })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / self.nx as f64
    }

    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.xmin + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.center(i)).collect()
    }

    /// Same cells, moved rigidly by `offset`.
    pub fn translated(&self, offset: f64) -> Self {
        Self {
            xmin: self.xmin + offset,
            xmax: self.xmax + offset,
            nx: self.nx,
        }
    }

    pub fn same_cells(&self, other: &Grid) -> bool {
        self.nx == other.nx && self.xmin == other.xmin && self.xmax == other.xmax
    }

    /// Fractional cell-centre coordinate of `x` (0 at the first centre).
    #[inline]
    pub fn locate(&self, x: f64) -> f64 {
        (x - self.xmin) / self.dx() - 0.5
    }
}

/// Uniform time grid on `[t0, t0 + nt*dt]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub nt: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, nt: usize) -> Result<Self> {
        if !(horizon > t0) {
            return Err(Error::config(format!("time grid needs t0 < T (got {t0}, {horizon})")));
        }
        if nt == 0 {
            return Err(Error::config("time grid needs nt >= 1"));
        }
        Ok(Self { t0, horizon, nt })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.nt as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.nt {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.nt).map(|k| self.time(k)).collect()
    }
}

/// Space-time grid descriptor used by the PDE solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub space: Grid,
    pub nt: usize,
    pub horizon: f64,
}

impl SpaceTimeGrid {
    pub fn new(space: Grid, nt: usize, horizon: f64) -> Result<Self> {
        if nt < 1 {
            return Err(Error::config("nt must be at least 1"));
        }
        if !(horizon > 0.0) {
            return Err(Error::config(format!("horizon must be positive (got {horizon})")));
        }
        Ok(Self { space, nt, horizon })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.nt {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Index of `t` on the time grid, if it lies on a node.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let r = t / self.dt();
        let k = r.round();
        if (r - k).abs() > 1e-9 || k < 0.0 || k as usize > self.nt {
            return Err(Error::domain(format!(
                "time {t} is not a node of the time grid (dt = {})",
                self.dt()
            )));
        }
        Ok(k as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_and_locate_agree() {
        let g = Grid::new(-1.0, 1.0, 8).unwrap();
        for i in 0..g.nx {
            assert!((g.locate(g.center(i)) - i as f64).abs() < 1e-12);
        }
        assert!((g.dx() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_bounds() {
        assert!(Grid::new(1.0, 1.0, 10).is_err());
        assert!(Grid::new(0.0, 1.0, 2).is_err());
    }

    #[test]
    fn time_index_round_trip() {
        let st = SpaceTimeGrid::new(Grid::new(0.0, 1.0, 10).unwrap(), 40, 1.0).unwrap();
        assert_eq!(st.index_of(0.25).unwrap(), 10);
        assert_eq!(st.index_of(1.0).unwrap(), 40);
        assert!(st.index_of(0.3333).is_err());
    }
}
