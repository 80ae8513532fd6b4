//! Axis-aligned cells and regions built as disjoint unions of cells.
//!
//! Cells are half-open `[lo, hi)` along every axis except where the cell
//! touches the top of the domain it was carved from; there the interval is
//! closed. With that convention the leaves of a midpoint partition tile their
//! domain exactly, and every point belongs to exactly one leaf.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub closed_hi: Vec<bool>,
}

impl Cell {
    /// A closed box `[lo, hi]` in every dimension.
    pub fn closed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Argument(format!(
                "cell bounds must be non-empty and of equal length (got {} and {})",
                lo.len(),
                hi.len()
            )));
        }
        for (d, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::Argument(format!(
                    "cell axis {d}: need lo < hi, got [{l}, {h}]"
                )));
            }
        }
        let closed_hi = vec![true; lo.len()];
        Ok(Self { lo, hi, closed_hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.width(d)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|d| {
                x[d] >= self.lo[d]
                    && (x[d] < self.hi[d] || (self.closed_hi[d] && x[d] == self.hi[d]))
            })
    }

    /// Midpoint of the cell along `axis`.
    pub fn midpoint(&self, axis: usize) -> f64 {
        0.5 * (self.lo[axis] + self.hi[axis])
    }

    /// Splits at the midpoint of `axis`. Points on the cut plane go to the
    /// upper child.
    pub fn split(&self, axis: usize) -> (Cell, Cell) {
        let mid = self.midpoint(axis);
        let mut lower = self.clone();
        lower.hi[axis] = mid;
        lower.closed_hi[axis] = false;
        let mut upper = self.clone();
        upper.lo[axis] = mid;
        (lower, upper)
    }

    /// Intersection with positive volume, or `None`.
    pub fn intersect(&self, other: &Cell) -> Option<Cell> {
        let n = self.dim();
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        let mut closed = Vec::with_capacity(n);
        for d in 0..n {
            let l = self.lo[d].max(other.lo[d]);
            let (h, c) = if self.hi[d] < other.hi[d] {
                (self.hi[d], self.closed_hi[d])
            } else if other.hi[d] < self.hi[d] {
                (other.hi[d], other.closed_hi[d])
            } else {
                (self.hi[d], self.closed_hi[d] && other.closed_hi[d])
            };
            if !(l < h) {
                return None;
            }
            lo.push(l);
            hi.push(h);
            closed.push(c);
        }
        Some(Cell {
            lo,
            hi,
            closed_hi: closed,
        })
    }

    pub fn intersection_volume(&self, other: &Cell) -> f64 {
        let mut v = 1.0;
        for d in 0..self.dim() {
            let w = self.hi[d].min(other.hi[d]) - self.lo[d].max(other.lo[d]);
            if w <= 0.0 {
                return 0.0;
            }
            v *= w;
        }
        v
    }
}

/// Membership contract for `D_k` and `S_k`: a disjoint union of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionIndicator {
    cells: Vec<Cell>,
    whole: bool,
}

impl RegionIndicator {
    /// The whole design space.
    pub fn whole(cell: Cell) -> Self {
        Self {
            cells: vec![cell],
            whole: true,
        }
    }

    /// A union of mutually disjoint cells. Overlaps are rejected.
    pub fn from_cells(cells: Vec<Cell>) -> Result<Self> {
        if let Some(first) = cells.first() {
            let dim = first.dim();
            if cells.iter().any(|c| c.dim() != dim) {
                return Err(Error::Argument("region cells have mixed dimensions".into()));
            }
        }
        for i in 0..cells.len() {
            for j in (i + 1)..cells.len() {
                if cells[i].intersection_volume(&cells[j]) > 0.0 {
                    return Err(Error::Argument(format!("region cells {i} and {j} overlap")));
                }
            }
        }
        Ok(Self {
            cells,
            whole: false,
        })
    }

    /// Skips the pairwise overlap check; callers guarantee disjointness.
    pub(crate) fn from_disjoint_cells(cells: Vec<Cell>) -> Self {
        Self {
            cells,
            whole: false,
        }
    }

    pub fn is_whole(&self) -> bool {
        self.whole
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn dim(&self) -> usize {
        self.cells.first().map_or(0, Cell::dim)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.cells.iter().any(|c| c.contains(x))
    }

    pub fn volume(&self) -> f64 {
        self.cells.iter().map(Cell::volume).sum()
    }

    /// Volume of `cell ∩ region`.
    pub fn intersection_volume(&self, cell: &Cell) -> f64 {
        self.cells.iter().map(|c| c.intersection_volume(cell)).sum()
    }

    /// The pieces of `cell ∩ region`, each a cell.
    pub fn clip(&self, cell: &Cell) -> Vec<Cell> {
        self.cells
            .iter()
            .filter_map(|c| c.intersect(cell))
            .collect()
    }

    /// Smallest closed box containing the region.
    pub fn bounding_box(&self) -> Option<Cell> {
        let first = self.cells.first()?;
        let mut lo = first.lo.clone();
        let mut hi = first.hi.clone();
        for c in &self.cells[1..] {
            for d in 0..lo.len() {
                lo[d] = lo[d].min(c.lo[d]);
                hi[d] = hi[d].max(c.hi[d]);
            }
        }
        Some(Cell {
            closed_hi: vec![true; lo.len()],
            lo,
            hi,
        })
    }

    /// Set inclusion up to a relative volume tolerance.
    pub fn is_subset_of(&self, other: &RegionIndicator, rel_tol: f64) -> bool {
        self.cells.iter().all(|c| {
            let v = c.volume();
            (other.intersection_volume(c) - v).abs() <= rel_tol * v
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Cell {
        Cell::closed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn split_assigns_cut_plane_to_upper_child() {
        let (lower, upper) = unit_square().split(0);
        assert_eq!(lower.volume(), 0.5);
        assert_eq!(upper.volume(), 0.5);
        assert!(!lower.contains(&[0.5, 0.2]));
        assert!(upper.contains(&[0.5, 0.2]));
        assert!(upper.contains(&[1.0, 1.0]));
        assert!(lower.contains(&[0.0, 1.0]));
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(Cell::closed(vec![1.0], vec![1.0]).is_err());
        assert!(Cell::closed(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn intersection_and_clip() {
        let (left, _) = unit_square().split(0);
        let (bottom, _) = unit_square().split(1);
        let piece = left.intersect(&bottom).unwrap();
        assert_eq!(piece.volume(), 0.25);
        assert_eq!(piece.hi, vec![0.5, 0.5]);
        let region = RegionIndicator::from_cells(vec![left.clone()]).unwrap();
        assert_eq!(region.intersection_volume(&bottom), 0.25);
        assert_eq!(region.clip(&unit_square()), vec![left.clone()]);
        assert!(region.is_subset_of(&RegionIndicator::whole(unit_square()), 1e-12));
        assert!(!RegionIndicator::whole(unit_square()).is_subset_of(&region, 1e-12));
    }

    #[test]
    fn overlapping_cells_rejected() {
        assert!(RegionIndicator::from_cells(vec![unit_square(), unit_square()]).is_err());
        let (a, b) = unit_square().split(1);
        assert!(RegionIndicator::from_cells(vec![a, b]).is_ok());
    }
}
