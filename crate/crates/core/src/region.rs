//! Measurable subsets of the grid, represented as node index sets.

use crate::error::{LabError, Result};
use crate::mesh::Grid;

/// A set of grid nodes with its measure and an optional bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    indices: Vec<usize>,
    measure: f64,
    bounds: Option<Vec<(f64, f64)>>,
}

impl RegionSet {
    /// Nodes whose coordinates lie in the closed box `bounds` (one pair per axis).
    pub fn from_box(grid: &Grid, bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.len() != grid.dim() {
            return Err(LabError::Dimension {
                expected: grid.dim(),
                got: bounds.len(),
            });
        }
        let slack: Vec<f64> = (0..grid.dim()).map(|a| 1e-9 * grid.dx(a)).collect();
        let indices = (0..grid.n_nodes())
            .filter(|&n| {
                let p = grid.position(n);
                bounds
                    .iter()
                    .enumerate()
                    .all(|(a, (lo, hi))| p[a] >= lo - slack[a] && p[a] <= hi + slack[a])
            })
            .collect();
        Ok(Self::with_bounds(grid, indices, Some(bounds.to_vec())))
    }

    pub fn interval(grid: &Grid, lo: f64, hi: f64) -> Result<Self> {
        Self::from_box(grid, &[(lo, hi)])
    }

    pub fn from_indices(grid: &Grid, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid.n_nodes()) {
            return Err(LabError::Invalid(format!(
                "node index {bad} out of range for {} nodes",
                grid.n_nodes()
            )));
        }
        Ok(Self::with_bounds(grid, indices, None))
    }

    pub fn from_mask(grid: &Grid, mask: &[bool]) -> Result<Self> {
        if mask.len() != grid.n_nodes() {
            return Err(LabError::GridMismatch(format!(
                "mask has {} entries for {} nodes",
                mask.len(),
                grid.n_nodes()
            )));
        }
        let idx = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Self::from_indices(grid, idx)
    }

    /// All nodes of the grid.
    pub fn whole(grid: &Grid) -> Self {
        let bounds = (0..grid.dim()).map(|a| grid.bounds(a)).collect();
        Self::with_bounds(grid, (0..grid.n_nodes()).collect(), Some(bounds))
    }

    fn with_bounds(grid: &Grid, indices: Vec<usize>, bounds: Option<Vec<(f64, f64)>>) -> Self {
        let measure = indices.iter().map(|&n| grid.node_measure(n)).sum();
        RegionSet {
            indices,
            measure,
            bounds,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn measure(&self) -> f64 {
        self.measure
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, n: usize) -> bool {
        self.indices.binary_search(&n).is_ok()
    }

    pub fn mask(&self, n_nodes: usize) -> Vec<bool> {
        let mut m = vec![false; n_nodes];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn indicator(&self, n_nodes: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_nodes];
        for &i in &self.indices {
            v[i] = 1.0;
        }
        v
    }

    pub fn intersection(&self, grid: &Grid, other: &RegionSet) -> Self {
        let idx = self
            .indices
            .iter()
            .copied()
            .filter(|&i| other.contains(i))
            .collect();
        Self::with_bounds(grid, idx, None)
    }

    pub fn union(&self, grid: &Grid, other: &RegionSet) -> Self {
        let mut idx: Vec<usize> = self.indices.iter().chain(&other.indices).copied().collect();
        idx.sort_unstable();
        idx.dedup();
        Self::with_bounds(grid, idx, None)
    }

    pub fn complement(&self, grid: &Grid) -> Self {
        let idx = (0..grid.n_nodes()).filter(|&i| !self.contains(i)).collect();
        Self::with_bounds(grid, idx, None)
    }

    /// Zero `phi` outside the region (orthogonal projection in `L2(mu)`).
    pub fn project(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; phi.len()];
        for &i in &self.indices {
            out[i] = phi[i];
        }
        out
    }

    /// Euclidean distance from each node to the region (brute force over region nodes
    /// when no box is known).
    pub fn euclidean_distance_field(&self, grid: &Grid) -> Vec<f64> {
        if let Some(b) = &self.bounds {
            return (0..grid.n_nodes())
                .map(|n| {
                    let p = grid.position(n);
                    let mut s = 0.0;
                    for (a, (lo, hi)) in b.iter().enumerate() {
                        let d = (lo - p[a]).max(p[a] - hi).max(0.0);
                        s += d * d;
                    }
                    s.sqrt()
                })
                .collect();
        }
        let pts: Vec<[f64; 2]> = self.indices.iter().map(|&i| grid.position(i)).collect();
        (0..grid.n_nodes())
            .map(|n| {
                let p = grid.position(n);
                pts.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}
