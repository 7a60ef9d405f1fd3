//! Uniform node-centred grids on intervals and rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Orientation of a stencil edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Along the first axis.
    AxisX,
    /// Along the second axis.
    AxisY,
    /// From `(i, j)` to `(i+1, j+1)`.
    Diagonal,
    /// From `(i+1, j)` to `(i, j+1)`.
    AntiDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub kind: EdgeKind,
}

/// Uniform grid with nodes on the box corners and reflecting boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    n_cells: [usize; 2],
    dx: [f64; 2],
}

impl Grid {
    pub fn new_1d(lo: f64, hi: f64, n_cells: usize) -> Result<Self> {
        Self::new(1, [lo, 0.0], [hi, 0.0], [n_cells, 0])
    }

    pub fn new_2d(lo: [f64; 2], hi: [f64; 2], n_cells: [usize; 2]) -> Result<Self> {
        Self::new(2, lo, hi, n_cells)
    }

    fn new(dim: usize, lo: [f64; 2], hi: [f64; 2], n_cells: [usize; 2]) -> Result<Self> {
        let mut dx = [1.0, 1.0];
        for axis in 0..dim {
            if !(lo[axis] < hi[axis]) || !lo[axis].is_finite() || !hi[axis].is_finite() {
                return Err(LabError::Invalid(format!(
                    "axis {axis} bounds [{}, {}] must be finite and increasing",
                    lo[axis], hi[axis]
                )));
            }
            if n_cells[axis] == 0 {
                return Err(LabError::Invalid(format!(
                    "axis {axis} needs at least one cell"
                )));
            }
            dx[axis] = (hi[axis] - lo[axis]) / n_cells[axis] as f64;
        }
        Ok(Grid {
            dim,
            lo,
            hi,
            n_cells,
            dx,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        (self.lo[axis], self.hi[axis])
    }

    pub fn n_cells(&self, axis: usize) -> usize {
        self.n_cells[axis]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.dx[axis]
    }

    /// Smallest spacing over all axes.
    pub fn min_spacing(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.dx[a])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.dim).map(|a| self.dx[a]).fold(0.0, f64::max)
    }

    /// Nodes along `axis`; 1 for the unused axis of a 1D grid.
    pub fn nodes_along(&self, axis: usize) -> usize {
        if axis < self.dim {
            self.n_cells[axis] + 1
        } else {
            1
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_along(0) * self.nodes_along(1)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + j * self.nodes_along(0)
    }

    pub fn coords(&self, n: usize) -> (usize, usize) {
        let nx = self.nodes_along(0);
        (n % nx, n / nx)
    }

    pub fn position(&self, n: usize) -> [f64; 2] {
        let (i, j) = self.coords(n);
        let x = self.lo[0] + i as f64 * self.dx[0];
        let y = if self.dim == 2 {
            self.lo[1] + j as f64 * self.dx[1]
        } else {
            0.0
        };
        [x, y]
    }

    /// Volume weight: product of spacings, halved per touching boundary face.
    pub fn node_measure(&self, n: usize) -> f64 {
        let (i, j) = self.coords(n);
        let mut m = 1.0;
        for (axis, k) in [(0, i), (1, j)].into_iter().take(self.dim) {
            let w = self.dx[axis];
            m *= if k == 0 || k == self.n_cells[axis] {
                0.5 * w
            } else {
                w
            };
        }
        m
    }

    pub fn node_measures(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|n| self.node_measure(n)).collect()
    }

    pub fn total_measure(&self) -> f64 {
        (0..self.dim).map(|a| self.hi[a] - self.lo[a]).product()
    }

    /// Node closest to `x`, clamped to the box.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let pick = |axis: usize| -> usize {
            let k = ((x[axis] - self.lo[axis]) / self.dx[axis]).round();
            k.clamp(0.0, self.n_cells[axis] as f64) as usize
        };
        if self.dim == 1 {
            pick(0)
        } else {
            self.index(pick(0), pick(1))
        }
    }

    /// Full stencil edge list. In 1D: nearest neighbours. In 2D: both axes
    /// followed by both cell diagonals, in a fixed order shared by every form
    /// on this grid.
    pub fn edges(&self) -> Vec<Edge> {
        let nx = self.nodes_along(0);
        let ny = self.nodes_along(1);
        let mut edges = Vec::new();
        for j in 0..ny {
            for i in 0..nx - 1 {
                edges.push(Edge {
                    u: self.index(i, j),
                    v: self.index(i + 1, j),
                    kind: EdgeKind::AxisX,
                });
            }
        }
        if self.dim == 2 {
            for j in 0..ny - 1 {
                for i in 0..nx {
                    edges.push(Edge {
                        u: self.index(i, j),
                        v: self.index(i, j + 1),
                        kind: EdgeKind::AxisY,
                    });
                }
            }
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    edges.push(Edge {
                        u: self.index(i, j),
                        v: self.index(i + 1, j + 1),
                        kind: EdgeKind::Diagonal,
                    });
                }
            }
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    edges.push(Edge {
                        u: self.index(i + 1, j),
                        v: self.index(i, j + 1),
                        kind: EdgeKind::AntiDiagonal,
                    });
                }
            }
        }
        edges
    }

    /// Displacement vector from `edge.u` to `edge.v`.
    pub fn edge_vector(&self, edge: &Edge) -> [f64; 2] {
        let a = self.position(edge.u);
        let b = self.position(edge.v);
        [b[0] - a[0], b[1] - a[1]]
    }

    pub fn edge_midpoint(&self, edge: &Edge) -> [f64; 2] {
        let a = self.position(edge.u);
        let b = self.position(edge.v);
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }

    /// Halve (or quarter, etc.) the spacing: `factor` times as many cells per axis.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        let mut n = self.n_cells;
        for a in 0..self.dim {
            n[a] *= factor;
        }
        Grid::new(self.dim, self.lo, self.hi, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_and_measures() {
        let g = Grid::new_1d(-1.0, 1.0, 8).unwrap();
        assert_eq!(g.n_nodes(), 9);
        assert!((g.dx(0) * 8.0 - 2.0).abs() < 1e-12);
        assert_eq!(g.node_measure(0), 0.125);
        assert_eq!(g.node_measure(4), 0.25);
        let total: f64 = g.node_measures().iter().sum();
        assert!((total - 2.0).abs() < 1e-12);

        let g2 = Grid::new_2d([0.0, 0.0], [2.0, 1.0], [4, 2]).unwrap();
        assert_eq!(g2.n_nodes(), 15);
        let total: f64 = g2.node_measures().iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        assert_eq!(g2.node_measure(0), 0.0625);
        assert_eq!(g2.node_measure(g2.index(2, 1)), 0.25);
        assert_eq!(g2.node_measure(g2.index(2, 0)), 0.125);
        assert!(g2.node_measures().iter().all(|m| *m > 0.0));
    }

    #[test]
    fn edge_counts() {
        let g = Grid::new_2d([0.0, 0.0], [1.0, 1.0], [3, 2]).unwrap();
        let e = g.edges();
        // 3*3 horizontal + 4*2 vertical + 2 * 6 diagonals
        assert_eq!(e.len(), 9 + 8 + 12);
        assert_eq!(Grid::new_1d(0.0, 1.0, 5).unwrap().edges().len(), 5);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(Grid::new_1d(1.0, 1.0, 4).is_err());
        assert!(Grid::new_1d(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn nearest_node_clamps() {
        let g = Grid::new_1d(0.0, 1.0, 4).unwrap();
        assert_eq!(g.nearest_node(&[0.3]), 1);
        assert_eq!(g.nearest_node(&[7.0]), 4);
    }
}
