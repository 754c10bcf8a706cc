//! Uniform n-dimensional cell grids (n = 1, 2, 3) on a box of side L.
//!
//! Cell `i` along an axis has center `(i - N/2) h` (integer division), so the
//! origin is always a cell center. Flat index: axis 0 fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    /// Values pinned to zero at cell centers outside the closed ball.
    DirichletBall {
        center: [f64; 3],
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub cells: usize,
    pub side: f64,
    pub boundary: Boundary,
}

pub const MIN_CELLS: usize = 8;

impl GridSpec {
    pub fn periodic(n: usize, cells: usize, side: f64) -> Result<Self> {
        let g = Self {
            n,
            cells,
            side,
            boundary: Boundary::Periodic,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_ball(self, center: [f64; 3], radius: f64) -> Result<Self> {
        let g = Self {
            boundary: Boundary::DirichletBall { center, radius },
            ..self
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n) {
            return Err(Error::Grid(format!("dimension {} not in 1..=3", self.n)));
        }
        if self.cells < MIN_CELLS {
            return Err(Error::Grid(format!(
                "{} cells per axis, need at least {MIN_CELLS}",
                self.cells
            )));
        }
        if !(self.side > 0.0) || !self.side.is_finite() {
            return Err(Error::Grid(format!(
                "box side {} must be positive",
                self.side
            )));
        }
        if let Boundary::DirichletBall { center, radius } = self.boundary {
            if !(radius > 0.0) {
                return Err(Error::Grid("ball radius must be positive".into()));
            }
            let (lo, hi) = self.extent();
            for d in 0..self.n {
                if center[d] - radius <= lo || center[d] + radius >= hi {
                    return Err(Error::Grid("ball must fit strictly inside the box".into()));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.side / self.cells as f64
    }

    pub fn len(&self) -> usize {
        self.cells.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.n as i32)
    }

    /// Lower and upper face coordinate of the box along any axis.
    pub fn extent(&self) -> (f64, f64) {
        let h = self.h();
        let lo = -((self.cells / 2) as f64) * h - 0.5 * h;
        (lo, lo + self.side)
    }

    #[inline]
    pub fn stride(&self, d: usize) -> usize {
        self.cells.pow(d as u32)
    }

    #[inline]
    pub fn coord_of(&self, i: usize) -> f64 {
        (i as f64 - (self.cells / 2) as f64) * self.h()
    }

    /// Integer index of the cell whose center is nearest to `x`, per axis.
    pub fn nearest(&self, x: &[f64; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        let h = self.h();
        for d in 0..self.n {
            let k = (x[d] / h).round() as i64 + (self.cells / 2) as i64;
            out[d] = k.rem_euclid(self.cells as i64) as usize;
        }
        out
    }

    pub fn flat(&self, ix: &[usize; 3]) -> usize {
        let mut f = 0;
        for d in (0..self.n).rev() {
            f = f * self.cells + ix[d];
        }
        f
    }

    pub fn unflat(&self, mut f: usize) -> [usize; 3] {
        let mut ix = [0; 3];
        for item in ix.iter_mut().take(self.n) {
            *item = f % self.cells;
            f /= self.cells;
        }
        ix
    }

    pub fn center(&self, f: usize) -> [f64; 3] {
        let ix = self.unflat(f);
        let mut x = [0.0; 3];
        for d in 0..self.n {
            x[d] = self.coord_of(ix[d]);
        }
        x
    }

    /// Center of the cell at `ix`; also defined for `ix` outside `0..cells`.
    pub fn center_of(&self, ix: &[i64; 3]) -> [f64; 3] {
        let h = self.h();
        let mut x = [0.0; 3];
        for d in 0..self.n {
            x[d] = (ix[d] - (self.cells / 2) as i64) as f64 * h;
        }
        x
    }

    /// Whether `x` coincides with a cell center to rounding.
    pub fn is_center(&self, x: &[f64; 3]) -> bool {
        let h = self.h();
        (0..self.n).all(|d| {
            let k = x[d] / h;
            (k - k.round()).abs() < 1e-9
        })
    }

    /// Signed periodic offset in cells from `a` to `b` along one axis.
    #[inline]
    pub fn offset(&self, a: usize, b: usize) -> i64 {
        let n = self.cells as i64;
        let mut d = b as i64 - a as i64;
        if d > n / 2 {
            d -= n;
        } else if d < -(n / 2) {
            d += n;
        }
        d
    }

    /// Minimum-image squared distance in cell units between two flat indices.
    pub fn dist2_cells(&self, a: usize, b: usize) -> i64 {
        let ia = self.unflat(a);
        let ib = self.unflat(b);
        (0..self.n).map(|d| self.offset(ia[d], ib[d]).pow(2)).sum()
    }

    /// Minimum-image displacement `b - a` in physical units.
    pub fn displacement(&self, a: usize, b: usize) -> [f64; 3] {
        let ia = self.unflat(a);
        let ib = self.unflat(b);
        let h = self.h();
        let mut out = [0.0; 3];
        for d in 0..self.n {
            out[d] = self.offset(ia[d], ib[d]) as f64 * h;
        }
        out
    }

    /// Interior mask: true where a cell center lies in the Dirichlet ball.
    pub fn mask(&self) -> Option<Vec<bool>> {
        match self.boundary {
            Boundary::Periodic => None,
            Boundary::DirichletBall { center, radius } => Some(
                (0..self.len())
                    .map(|f| {
                        let x = self.center(f);
                        (0..self.n).map(|d| (x[d] - center[d]).powi(2)).sum::<f64>()
                            <= radius * radius
                    })
                    .collect(),
            ),
        }
    }

    pub fn periodic_twin(&self) -> Self {
        Self {
            boundary: Boundary::Periodic,
            ..*self
        }
    }
}

/// Precomputed periodic neighbour tables.
#[derive(Debug, Clone)]
pub struct Neighbors {
    pub plus: Vec<Vec<u32>>,
    pub minus: Vec<Vec<u32>>,
}

impl Neighbors {
    pub fn new(g: &GridSpec) -> Self {
        let len = g.len();
        let mut plus = vec![vec![0u32; len]; g.n];
        let mut minus = vec![vec![0u32; len]; g.n];
        for f in 0..len {
            let ix = g.unflat(f);
            for d in 0..g.n {
                let s = g.stride(d);
                let p = if ix[d] + 1 == g.cells {
                    f + s - g.cells * s
                } else {
                    f + s
                };
                let m = if ix[d] == 0 {
                    f + g.cells * s - s
                } else {
                    f - s
                };
                plus[d][f] = p as u32;
                minus[d][f] = m as u32;
            }
        }
        Self { plus, minus }
    }
}
