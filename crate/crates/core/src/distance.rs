//! Intrinsic distances: shortest paths in the edge metric, certificate checks,
//! effective resistance and exhaustion limits.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::form::{carre_du_champ, DiscreteForm};
use crate::region::RegionSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMethod {
    Eikonal,
    Variational,
    DecayFit,
}

impl DistanceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceMethod::Eikonal => "eikonal",
            DistanceMethod::Variational => "variational",
            DistanceMethod::DecayFit => "decay-fit",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistanceReport {
    pub value: f64,
    pub method: DistanceMethod,
    /// Test function for variational reports.
    pub certificate: Option<Vec<f64>>,
    /// `sup_n Gamma(certificate)(n)` when a certificate was checked.
    pub max_gamma: Option<f64>,
    /// Node path from the first region to the second for eikonal reports.
    pub path: Option<Vec<usize>>,
    /// False when a certificate was rejected.
    pub valid: bool,
}

impl DistanceReport {
    /// Number of edges on the stored path.
    pub fn hops(&self) -> Option<usize> {
        self.path.as_ref().map(|p| p.len().saturating_sub(1))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Node adjacency with finite edge lengths, in compressed rows.
struct Adjacency {
    start: Vec<usize>,
    nbr: Vec<usize>,
    len: Vec<f64>,
}

impl Adjacency {
    fn new(form: &DiscreteForm) -> Self {
        let n = form.n_nodes();
        let lens: Vec<f64> = (0..form.edges().len())
            .map(|k| form.edge_length(k))
            .collect();
        let mut deg = vec![0usize; n + 1];
        for (e, l) in form.edges().iter().zip(&lens) {
            if l.is_finite() {
                deg[e.u + 1] += 1;
                deg[e.v + 1] += 1;
            }
        }
        for i in 0..n {
            deg[i + 1] += deg[i];
        }
        let mut fill = deg.clone();
        let m = deg[n];
        let mut nbr = vec![0; m];
        let mut len = vec![0.0; m];
        for (e, l) in form.edges().iter().zip(&lens) {
            if l.is_finite() {
                nbr[fill[e.u]] = e.v;
                len[fill[e.u]] = *l;
                fill[e.u] += 1;
                nbr[fill[e.v]] = e.u;
                len[fill[e.v]] = *l;
                fill[e.v] += 1;
            }
        }
        Adjacency {
            start: deg,
            nbr,
            len,
        }
    }
}

fn dijkstra(form: &DiscreteForm, source: &RegionSet) -> Result<(Vec<f64>, Vec<usize>)> {
    if source.is_empty() {
        return Err(LabError::EmptyRegion("source"));
    }
    let n = form.n_nodes();
    if source.indices().iter().any(|&i| i >= n) {
        return Err(LabError::GridMismatch("region index beyond grid".into()));
    }
    let adj = Adjacency::new(form);
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    for &s in source.indices() {
        dist[s] = 0.0;
        heap.push(Item(0.0, s));
    }
    while let Some(Item(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for k in adj.start[u]..adj.start[u + 1] {
            let v = adj.nbr[k];
            let nd = d + adj.len[k];
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = u;
                heap.push(Item(nd, v));
            }
        }
    }
    Ok((dist, pred))
}

/// Shortest-path distance from `source` to every node under the edge lengths
/// of the form. Severed edges are never used; unreachable nodes get `+inf`.
pub fn eikonal_distance(form: &DiscreteForm, source: &RegionSet) -> Result<Vec<f64>> {
    Ok(dijkstra(form, source)?.0)
}

/// `inf` over `a in A`, `b in B` of the shortest-path distance, with the
/// realizing path from `A` to `B`.
pub fn set_distance(form: &DiscreteForm, a: &RegionSet, b: &RegionSet) -> Result<DistanceReport> {
    if b.is_empty() {
        return Err(LabError::EmptyRegion("B"));
    }
    let (dist, pred) = dijkstra(form, a)?;
    let mut best = (f64::INFINITY, usize::MAX);
    for &j in b.indices() {
        if dist[j] < best.0 {
            best = (dist[j], j);
        }
    }
    let path = (best.1 != usize::MAX).then(|| {
        let mut p = vec![best.1];
        let mut cur = best.1;
        while pred[cur] != usize::MAX {
            cur = pred[cur];
            p.push(cur);
        }
        p.reverse();
        p
    });
    Ok(DistanceReport {
        value: best.0,
        method: DistanceMethod::Eikonal,
        certificate: None,
        max_gamma: None,
        path,
        valid: true,
    })
}

/// Check `psi` as a distance certificate: if `sup Gamma(psi) <= 1 + tol` the
/// report carries the lower bound `min_A psi - max_B psi` (clamped at 0).
/// A rejected certificate is reported with `valid = false` and value 0.
pub fn verify_certificate(
    form: &DiscreteForm,
    psi: &[f64],
    a: &RegionSet,
    b: &RegionSet,
    tol: f64,
) -> Result<DistanceReport> {
    if !(tol >= 0.0) {
        return Err(LabError::Range {
            name: "tol",
            value: tol,
            range: "[0, inf)",
        });
    }
    if a.is_empty() {
        return Err(LabError::EmptyRegion("A"));
    }
    if b.is_empty() {
        return Err(LabError::EmptyRegion("B"));
    }
    let g = carre_du_champ(form, psi)?;
    let gmax = g.iter().cloned().fold(0.0, f64::max);
    let valid = gmax <= 1.0 + tol;
    let inf_a = a
        .indices()
        .iter()
        .map(|&i| psi[i])
        .fold(f64::INFINITY, f64::min);
    let sup_b = b
        .indices()
        .iter()
        .map(|&i| psi[i])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DistanceReport {
        value: if valid { (inf_a - sup_b).max(0.0) } else { 0.0 },
        method: DistanceMethod::Variational,
        certificate: Some(psi.to_vec()),
        max_gamma: Some(gmax),
        path: None,
        valid,
    })
}

/// Clamped distance-to-`b` test function, rescaled so that its energy density
/// is at most 1. `cap` truncates the function (use at least the diameter).
pub fn eikonal_certificate(form: &DiscreteForm, b: &RegionSet, cap: f64) -> Result<Vec<f64>> {
    let mut psi = eikonal_distance(form, b)?;
    for p in psi.iter_mut() {
        *p = p.min(cap);
    }
    let gmax = carre_du_champ(form, &psi)?
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    if gmax > 1.0 {
        let s = 1.0 / gmax.sqrt();
        for p in psi.iter_mut() {
            *p *= s;
        }
    }
    Ok(psi)
}

/// `3 dx L`, with `L` a discrete Lipschitz bound of the local speed `c^{-1/2}`
/// taken over neighbouring edges of the same orientation.
pub fn default_certificate_tolerance(form: &DiscreteForm) -> f64 {
    let grid = form.grid();
    let dx = grid.max_spacing();
    let speed: Vec<f64> = form
        .tensors()
        .iter()
        .map(|c| {
            let (lo, _) = if grid.dim() == 1 {
                (c.xx, c.xx)
            } else {
                c.eigenvalues()
            };
            if lo > 0.0 {
                lo.powf(-0.5)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut lip = 0.0f64;
    for w in speed.windows(2) {
        if w[0].is_finite() && w[1].is_finite() {
            lip = lip.max((w[0] - w[1]).abs() / dx);
        }
    }
    3.0 * dx * lip
}

/// Resistance between nodes `a` and `b` of the weighted graph. In 1D the series
/// sum `sum 1/w_e`; in 2D the current-flow potential drop from a grounded
/// conjugate-gradient solve. `+inf` when no positive-weight path exists.
pub fn effective_resistance(form: &DiscreteForm, a: usize, b: usize) -> Result<f64> {
    let n = form.n_nodes();
    if a == b {
        return Err(LabError::Invalid(
            "resistance needs two distinct nodes".into(),
        ));
    }
    if a >= n || b >= n {
        return Err(LabError::GridMismatch(format!(
            "node out of range for {n} nodes"
        )));
    }
    if form.grid().dim() == 1 {
        let (lo, hi) = (a.min(b), a.max(b));
        let mut r = 0.0;
        for w in &form.weights()[lo..hi] {
            if *w <= 0.0 {
                return Ok(f64::INFINITY);
            }
            r += 1.0 / w;
        }
        return Ok(r);
    }
    let comp = component_of(form, a);
    if !comp[b] {
        return Ok(f64::INFINITY);
    }
    // Unknowns: component nodes except the grounded `b`.
    let nodes: Vec<usize> = (0..n).filter(|&i| comp[i] && i != b).collect();
    let mut local = vec![usize::MAX; n];
    for (k, &i) in nodes.iter().enumerate() {
        local[i] = k;
    }
    let m = nodes.len();
    let mut diag = vec![0.0; m];
    for (e, w) in form.edges().iter().zip(form.weights()) {
        if *w > 0.0 {
            if local[e.u] != usize::MAX {
                diag[local[e.u]] += w;
            }
            if local[e.v] != usize::MAX {
                diag[local[e.v]] += w;
            }
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        y.fill(0.0);
        for (e, w) in form.edges().iter().zip(form.weights()) {
            if *w <= 0.0 {
                continue;
            }
            let (iu, iv) = (local[e.u], local[e.v]);
            let xu = if iu == usize::MAX { 0.0 } else { x[iu] };
            let xv = if iv == usize::MAX { 0.0 } else { x[iv] };
            let f = w * (xu - xv);
            if iu != usize::MAX {
                y[iu] += f;
            }
            if iv != usize::MAX {
                y[iv] -= f;
            }
        }
    };
    let mut rhs = vec![0.0; m];
    rhs[local[a]] = 1.0;
    let x = pcg(apply, &diag, &rhs, 1e-12, 20 * m + 1000)?;
    Ok(x[local[a]])
}

fn component_of(form: &DiscreteForm, a: usize) -> Vec<bool> {
    let n = form.n_nodes();
    let mut adj = vec![Vec::new(); n];
    for (e, w) in form.edges().iter().zip(form.weights()) {
        if *w > 0.0 {
            adj[e.u].push(e.v);
            adj[e.v].push(e.u);
        }
    }
    let mut seen = vec![false; n];
    let mut stack = vec![a];
    seen[a] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// Jacobi-preconditioned conjugate gradients.
fn pcg<F: Fn(&[f64], &mut [f64])>(
    apply: F,
    diag: &[f64],
    b: &[f64],
    rtol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let m = b.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; m];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; m];
    for it in 0..max_iter {
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rn = dot(&r, &r).sqrt();
        if rn <= rtol * bnorm {
            return Ok(x);
        }
        if !rn.is_finite() {
            return Err(LabError::Solver {
                iterations: it,
                residual: rn,
            });
        }
        for i in 0..m {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LabError::Solver {
        iterations: max_iter,
        residual: dot(&r, &r).sqrt() / bnorm,
    })
}

/// `d(A ∩ X_n; B)` for each member of an increasing family `X_n`. Empty
/// intersections give `+inf`.
pub fn exhaustion_distance(
    form: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    exhaustion: &[RegionSet],
) -> Result<Vec<DistanceReport>> {
    if a.is_empty() {
        return Err(LabError::EmptyRegion("A"));
    }
    let from_b = eikonal_distance(form, b)?;
    Ok(exhaustion
        .iter()
        .map(|x| {
            let value = a
                .indices()
                .iter()
                .filter(|&&i| x.contains(i))
                .map(|&i| from_b[i])
                .fold(f64::INFINITY, f64::min);
            DistanceReport {
                value,
                method: DistanceMethod::Eikonal,
                certificate: None,
                max_gamma: None,
                path: None,
                valid: true,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientField;
    use crate::form::{assemble, laplacian};
    use crate::mesh::Grid;

    fn form_1d(c: f64, lo: f64, hi: f64, n: usize) -> DiscreteForm {
        let g = Grid::new_1d(lo, hi, n).unwrap();
        assemble(&CoefficientField::constant_scalar(1, c).unwrap(), &g, None).unwrap()
    }

    #[test]
    fn unit_speed_is_euclidean() {
        let f = form_1d(1.0, -2.0, 2.0, 40);
        let g = f.grid().clone();
        let src = RegionSet::interval(&g, 0.0, 0.0).unwrap();
        let d = eikonal_distance(&f, &src).unwrap();
        for n in 0..g.n_nodes() {
            assert!((d[n] - g.position(n)[0].abs()).abs() < 1e-12);
        }
        let f4 = form_1d(4.0, -2.0, 2.0, 40);
        let d4 = eikonal_distance(&f4, &src).unwrap();
        for n in 0..g.n_nodes() {
            assert!((d4[n] - 0.5 * g.position(n)[0].abs()).abs() < 1e-12);
        }
        assert!(eikonal_distance(&f, &RegionSet::interval(&g, 9.0, 9.5).unwrap()).is_err());
    }

    #[test]
    fn set_distance_examples() {
        let f = form_1d(1.0, -4.0, 4.0, 64);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, -2.0, -1.0).unwrap();
        let b = RegionSet::interval(&g, 1.0, 2.0).unwrap();
        let r = set_distance(&f, &a, &b).unwrap();
        assert!((r.value - 2.0).abs() <= g.dx(0));
        assert_eq!(r.hops(), Some(16));
        assert_eq!(set_distance(&f, &a, &a).unwrap().value, 0.0);
        let back = set_distance(&f, &b, &a).unwrap();
        assert!((back.value - r.value).abs() < 1e-12);
    }

    #[test]
    fn certificate_examples() {
        let f = form_1d(1.0, -4.0, 4.0, 64);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, -2.0, -1.0).unwrap();
        let b = RegionSet::interval(&g, 1.0, 2.0).unwrap();
        let zero = verify_certificate(&f, &vec![0.0; g.n_nodes()], &a, &b, 0.0).unwrap();
        assert!(zero.valid && zero.value == 0.0);
        let psi = eikonal_certificate(&f, &b, 100.0).unwrap();
        let tol = 3.0 * g.dx(0);
        let ok = verify_certificate(&f, &psi, &a, &b, tol).unwrap();
        assert!(ok.valid);
        let sd = set_distance(&f, &a, &b).unwrap().value;
        assert!((ok.value - sd).abs() <= 2.0 * g.dx(0));
        let twice: Vec<f64> = psi.iter().map(|v| 2.0 * v).collect();
        let bad = verify_certificate(&f, &twice, &a, &b, tol).unwrap();
        assert!(!bad.valid);
        assert!((bad.max_gamma.unwrap() - 4.0 * ok.max_gamma.unwrap()).abs() < 1e-9);
        assert!(verify_certificate(&f, &psi, &a, &b, -1.0).is_err());
    }

    #[test]
    fn resistance_examples() {
        let f = form_1d(1.0, 0.0, 1.0, 32);
        assert!((effective_resistance(&f, 0, 32).unwrap() - 1.0).abs() < 1e-12);
        let f2 = form_1d(2.0, 0.0, 1.0, 32);
        assert!((effective_resistance(&f2, 32, 0).unwrap() - 0.5).abs() < 1e-12);
        assert!(effective_resistance(&f, 3, 3).is_err());
        let z = form_1d(0.0, 0.0, 1.0, 4);
        assert_eq!(effective_resistance(&z, 0, 4).unwrap(), f64::INFINITY);
    }

    #[test]
    fn resistance_2d_square() {
        // Unit-coefficient strip: resistance between the two ends of a
        // long thin strip approaches length / width.
        let g = Grid::new_2d([0.0, 0.0], [1.0, 1.0], [1, 1]).unwrap();
        let f = laplacian(&g);
        // 4 nodes, 4 edges with weight 1/2 each: opposite corners see two
        // parallel paths of two half-weight edges, R = 2.
        let r = effective_resistance(&f, 0, 3).unwrap();
        assert!((r - 2.0).abs() < 1e-9);
        let cut = f.sever_across([-1.0, 0.5], [2.0, 0.5]);
        assert_eq!(effective_resistance(&cut, 0, 3).unwrap(), f64::INFINITY);
    }

    #[test]
    fn exhaustion_examples() {
        let f = form_1d(1.0, -4.0, 4.0, 64);
        let g = f.grid().clone();
        let b = RegionSet::interval(&g, 2.0, 3.0).unwrap();
        let near = RegionSet::interval(&g, 0.0, 0.5).unwrap();
        let far = RegionSet::interval(&g, -3.0, -2.5).unwrap();
        let a = near.union(&g, &far);
        let whole = RegionSet::whole(&g);
        let one = exhaustion_distance(&f, &a, &b, std::slice::from_ref(&whole)).unwrap();
        assert!((one[0].value - set_distance(&f, &a, &b).unwrap().value).abs() < 1e-12);
        let xs = vec![
            RegionSet::interval(&g, -4.0, -2.0).unwrap(),
            RegionSet::interval(&g, -4.0, 1.0).unwrap(),
        ];
        let seq = exhaustion_distance(&f, &a, &b, &xs).unwrap();
        let d_far = set_distance(&f, &far, &b).unwrap().value;
        let d_near = set_distance(&f, &near, &b).unwrap().value;
        assert!((seq[0].value - d_far).abs() < 1e-12);
        assert!((seq[1].value - d_near).abs() < 1e-12);
        assert!(seq[1].value < seq[0].value);
        let none = vec![RegionSet::interval(&g, 3.5, 4.0).unwrap()];
        assert_eq!(
            exhaustion_distance(&f, &a, &b, &none).unwrap()[0].value,
            f64::INFINITY
        );
    }
}
