//! Discrete Dirichlet forms on uniform grids.
//!
//! A [`DiscreteForm`] stores one weight per stencil edge and an optional
//! per-node potential, so that
//!
//! ```text
//! h(phi) = sum_e w_e (phi_u - phi_v)^2 + sum_n p_n phi_n^2
//! ```
//!
//! Each edge also keeps the coefficient tensor sampled at its midpoint. The
//! tensor defines the edge length of the intrinsic metric, `|e|_{C^{-1}}`,
//! used by the shortest-path distance. In 1D the two are tied by
//! `w_e = c_e / dx`.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::coefficients::{CoefficientField, Potential, Sym2};
use crate::error::{LabError, Result};
use crate::mesh::{Edge, EdgeKind, Grid};
use crate::region::RegionSet;

const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DiscreteForm {
    grid: Grid,
    edges: Arc<Vec<Edge>>,
    weights: Vec<f64>,
    tensors: Vec<Sym2>,
    potential: Option<Vec<f64>>,
    lambda: f64,
}

fn check_psd(c: Sym2, at: [f64; 2], dim: usize, scale: f64) -> Result<Sym2> {
    let lo = if dim == 1 { c.xx } else { c.eigenvalues().0 };
    if !lo.is_finite() || !c.xx.is_finite() || !c.yy.is_finite() || !c.xy.is_finite() {
        return Err(LabError::NonFinite("sampled coefficient"));
    }
    if lo < -NEG_TOL * scale.max(1.0) {
        return Err(LabError::BadField {
            eigenvalue: lo,
            position: at[..dim].to_vec(),
        });
    }
    if dim == 1 {
        Ok(Sym2::scalar(c.xx.max(0.0)))
    } else {
        Ok(Sym2::new(c.xx.max(0.0), c.xy, c.yy.max(0.0)))
    }
}

/// Assemble the discrete form of `field` on `grid`, sampling at edge midpoints.
///
/// In 2D the off-diagonal coefficient enters through the cell diagonals: a cell
/// with `c_xy > 0` puts weight `c_xy` on its diagonal edge and removes `c_xy / 2`
/// from each of its four axis edges (anti-diagonal when `c_xy < 0`). This is exact
/// for affine functions and keeps every weight nonnegative as long as
/// `c_xx dy/dx >= |c_xy|` and `c_yy dx/dy >= |c_xy|`.
pub fn assemble(
    field: &CoefficientField,
    grid: &Grid,
    potential: Option<&Potential>,
) -> Result<DiscreteForm> {
    if field.dim() != grid.dim() {
        return Err(LabError::Dimension {
            expected: grid.dim(),
            got: field.dim(),
        });
    }
    let edges = grid.edges();
    let scale = field.upper_bound();
    let tensors = edges
        .iter()
        .map(|e| {
            let mid = grid.edge_midpoint(e);
            check_psd(field.eval(&mid), mid, grid.dim(), scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = edge_weights(grid, &edges, &tensors)?;
    let potential = potential.map(|p| node_potential(grid, p));
    Ok(DiscreteForm {
        grid: grid.clone(),
        edges: Arc::new(edges),
        weights,
        tensors,
        potential,
        lambda: field.upper_bound(),
    })
}

fn node_potential(grid: &Grid, p: &Potential) -> Vec<f64> {
    (0..grid.n_nodes())
        .map(|n| p.eval(&grid.position(n)[..grid.dim()]) * grid.node_measure(n))
        .collect()
}

fn edge_weights(grid: &Grid, edges: &[Edge], tensors: &[Sym2]) -> Result<Vec<f64>> {
    if grid.dim() == 1 {
        let dx = grid.dx(0);
        return Ok(tensors.iter().map(|c| c.xx / dx).collect());
    }
    let (dx, dy) = (grid.dx(0), grid.dx(1));
    let (ncx, ncy) = (grid.n_cells(0), grid.n_cells(1));
    let (nx, ny) = (ncx + 1, ncy + 1);
    let h_off = 0;
    let v_off = (nx - 1) * ny;
    let d_off = v_off + nx * (ny - 1);
    let a_off = d_off + ncx * ncy;
    let hx = |i: usize, j: usize| h_off + i + j * (nx - 1);
    let vy = |i: usize, j: usize| v_off + i + j * nx;

    let mut w = vec![0.0; edges.len()];
    for j in 0..ncy {
        for i in 0..ncx {
            let cell = d_off + i + j * ncx;
            let cxy = tensors[cell].xy;
            for e in [hx(i, j), hx(i, j + 1)] {
                w[e] += 0.5 * tensors[e].xx * dy / dx - 0.5 * cxy.abs();
            }
            for e in [vy(i, j), vy(i + 1, j)] {
                w[e] += 0.5 * tensors[e].yy * dx / dy - 0.5 * cxy.abs();
            }
            if cxy > 0.0 {
                w[cell] += cxy;
            } else if cxy < 0.0 {
                w[a_off + i + j * ncx] -= cxy;
            }
        }
    }
    for (k, wk) in w.iter_mut().enumerate() {
        if *wk < 0.0 {
            let c = tensors[k];
            let scale = c.xx.abs().max(c.yy.abs()).max(1.0) * (dx / dy).max(dy / dx);
            if *wk < -NEG_TOL * scale {
                return Err(LabError::Invalid(format!(
                    "cross-term stencil gives negative weight {wk:e} on edge {k}; \
                     the field is not diagonally dominant at this resolution"
                )));
            }
            *wk = 0.0;
        }
    }
    Ok(w)
}

/// Unit-coefficient comparison form on `grid`.
pub fn laplacian(grid: &Grid) -> DiscreteForm {
    let field = CoefficientField::constant(grid.dim(), Sym2::IDENTITY)
        .expect("identity is positive definite");
    assemble(&field, grid, None).expect("identity assembles on any grid")
}

/// `h + eps * l` with `l` the unit-coefficient form on the same grid.
pub fn regularize(form: &DiscreteForm, epsilon: f64) -> Result<DiscreteForm> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(LabError::Range {
            name: "epsilon",
            value: epsilon,
            range: "(0, inf)",
        });
    }
    let l = laplacian(&form.grid);
    let mut out = form.clone();
    for (w, wl) in out.weights.iter_mut().zip(&l.weights) {
        *w += epsilon * wl;
    }
    for (c, e) in out.tensors.iter_mut().zip(out.edges.iter()) {
        // Diagonal edges carry the tensor for the metric only.
        *c = *c + Sym2::scalar(epsilon);
        if out.grid.dim() == 1 {
            *c = Sym2::scalar(c.xx);
        }
        let _ = e;
    }
    out.lambda += epsilon;
    Ok(out)
}

/// Nonnegative cutoff on the nodes of a grid.
#[derive(Debug, Clone)]
pub struct CutoffFunction {
    values: Vec<f64>,
    support: RegionSet,
    plateau: RegionSet,
}

impl CutoffFunction {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(LabError::GridMismatch(format!(
                "cutoff has {} values for {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(LabError::Range {
                name: "cutoff value",
                value: *v,
                range: "[0, 1]",
            });
        }
        let support =
            RegionSet::from_mask(grid, &values.iter().map(|v| *v > 0.0).collect::<Vec<_>>())?;
        let plateau =
            RegionSet::from_mask(grid, &values.iter().map(|v| *v == 1.0).collect::<Vec<_>>())?;
        Ok(CutoffFunction {
            values,
            support,
            plateau,
        })
    }

    pub fn constant(grid: &Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.n_nodes()])
    }

    /// Equal to 1 within `plateau_radius` of `region` (Euclidean), decaying
    /// linearly to 0 over `ramp_width`.
    pub fn ramp_around(
        grid: &Grid,
        region: &RegionSet,
        plateau_radius: f64,
        ramp_width: f64,
    ) -> Result<Self> {
        if !(ramp_width > 0.0) || !(plateau_radius >= 0.0) {
            return Err(LabError::Invalid("ramp needs positive width".into()));
        }
        let d = region.euclidean_distance_field(grid);
        let vals = d
            .iter()
            .map(|&r| (1.0 - (r - plateau_radius) / ramp_width).clamp(0.0, 1.0))
            .collect();
        Self::new(grid, vals)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn support(&self) -> &RegionSet {
        &self.support
    }

    pub fn plateau(&self) -> &RegionSet {
        &self.plateau
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Truncated form: every edge weight is multiplied by the endpoint average of the
/// cutoff, every node potential by its nodal value.
pub fn truncate(form: &DiscreteForm, cutoff: &CutoffFunction) -> Result<DiscreteForm> {
    let phi = cutoff.values();
    if phi.len() != form.grid.n_nodes() {
        return Err(LabError::GridMismatch(format!(
            "cutoff has {} values for {} nodes",
            phi.len(),
            form.grid.n_nodes()
        )));
    }
    let mut out = form.clone();
    for (k, e) in form.edges.iter().enumerate() {
        let f = 0.5 * (phi[e.u] + phi[e.v]);
        out.weights[k] *= f;
        out.tensors[k] = out.tensors[k].scale(f);
    }
    if let Some(p) = out.potential.as_mut() {
        for (pn, f) in p.iter_mut().zip(phi) {
            *pn *= f;
        }
    }
    out.lambda *= cutoff.sup();
    Ok(out)
}

/// Nodal density of the energy measure,
/// `Gamma(psi)(n) = mu_n^{-1} * 1/2 * sum_{e ∋ n} w_e (psi_u - psi_v)^2`.
pub fn carre_du_champ(form: &DiscreteForm, psi: &[f64]) -> Result<Vec<f64>> {
    form.check_len(psi)?;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("psi"));
    }
    let mut g = vec![0.0; psi.len()];
    for (e, w) in form.edges.iter().zip(&form.weights) {
        if *w == 0.0 {
            continue;
        }
        let d = psi[e.u] - psi[e.v];
        let half = 0.5 * w * d * d;
        g[e.u] += half;
        g[e.v] += half;
    }
    for (n, gn) in g.iter_mut().enumerate() {
        *gn /= form.grid.node_measure(n);
    }
    Ok(g)
}

/// Largest increment of `psi` per unit intrinsic length over all edges,
/// `max_e |psi_u - psi_v| / |e|`. Severed edges are ignored.
///
/// Unlike the sup of the nodal density, this is exactly monotone under
/// pointwise max and min of two functions.
pub fn metric_slope(form: &DiscreteForm, psi: &[f64]) -> Result<f64> {
    form.check_len(psi)?;
    let mut s = 0.0f64;
    for (k, e) in form.edges.iter().enumerate() {
        let len = form.edge_length(k);
        if len.is_finite() {
            let d = (psi[e.u] - psi[e.v]).abs();
            if d > 0.0 {
                s = s.max(d / len);
            }
        }
    }
    Ok(s)
}

impl DiscreteForm {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tensors(&self) -> &[Sym2] {
        &self.tensors
    }

    /// Per-node potential already multiplied by the node measure.
    pub fn node_potential(&self) -> Option<&[f64]> {
        self.potential.as_deref()
    }

    /// Constant with `h <= lambda * l`.
    pub fn lambda_bound(&self) -> f64 {
        self.lambda
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.grid.n_nodes() {
            return Err(LabError::GridMismatch(format!(
                "vector has {} entries for {} nodes",
                v.len(),
                self.grid.n_nodes()
            )));
        }
        Ok(())
    }

    /// Quadratic form value `h(phi)`.
    pub fn energy(&self, phi: &[f64]) -> Result<f64> {
        self.check_len(phi)?;
        let mut s: f64 = self
            .edges
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| {
                let d = phi[e.u] - phi[e.v];
                w * d * d
            })
            .sum();
        if let Some(p) = &self.potential {
            s += p.iter().zip(phi).map(|(p, f)| p * f * f).sum::<f64>();
        }
        Ok(s)
    }

    /// Same form with the potential replaced.
    pub fn with_potential(&self, potential: Option<&Potential>) -> DiscreteForm {
        let mut out = self.clone();
        out.potential = potential.map(|p| node_potential(&self.grid, p));
        out
    }

    /// Length of edge `k` in the intrinsic metric, `+inf` for severed edges.
    pub fn edge_length(&self, k: usize) -> f64 {
        let c = self.tensors[k];
        let v = self.grid.edge_vector(&self.edges[k]);
        if self.grid.dim() == 1 {
            return if c.xx > 0.0 {
                v[0].abs() / c.xx.sqrt()
            } else {
                f64::INFINITY
            };
        }
        if matches!(self.edges[k].kind, EdgeKind::AxisX | EdgeKind::AxisY) && self.weights[k] == 0.0
        {
            let axis_c = if self.edges[k].kind == EdgeKind::AxisX {
                c.xx
            } else {
                c.yy
            };
            if axis_c == 0.0 {
                return f64::INFINITY;
            }
        }
        c.inverse_quad(v).sqrt()
    }

    /// Multiply the weight and the metric tensor of edge `k` by `factor`.
    pub fn scale_edge(&mut self, k: usize, factor: f64) {
        self.weights[k] *= factor;
        self.tensors[k] = self.tensors[k].scale(factor);
    }

    /// Sever every edge whose closed segment meets the segment `[p, q]`.
    pub fn sever_across(&self, p: [f64; 2], q: [f64; 2]) -> DiscreteForm {
        let mut out = self.clone();
        for (k, e) in self.edges.iter().enumerate() {
            let a = self.grid.position(e.u);
            let b = self.grid.position(e.v);
            if segments_meet(a, b, p, q) {
                out.weights[k] = 0.0;
                out.tensors[k] = Sym2::ZERO;
            }
        }
        out
    }

    /// Sparse triplet dump: node count, then one `u v w` line per edge with nonzero
    /// weight, then `n n p` lines for nonzero node potentials.
    pub fn to_triplets(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.n_nodes());
        for (e, w) in self.edges.iter().zip(&self.weights) {
            if *w != 0.0 {
                let _ = writeln!(s, "{} {} {:e}", e.u, e.v, w);
            }
        }
        if let Some(p) = &self.potential {
            for (n, v) in p.iter().enumerate() {
                if *v != 0.0 {
                    let _ = writeln!(s, "{n} {n} {v:e}");
                }
            }
        }
        s
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], c: [f64; 2], eps: f64) -> bool {
    c[0] >= a[0].min(b[0]) - eps
        && c[0] <= a[0].max(b[0]) + eps
        && c[1] >= a[1].min(b[1]) - eps
        && c[1] <= a[1].max(b[1]) + eps
}

/// Closed segments `[a, b]` and `[p, q]` intersect.
fn segments_meet(a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]) -> bool {
    let scale = [a, b, p, q]
        .iter()
        .flat_map(|v| v.iter())
        .fold(1.0f64, |m, x| m.max(x.abs()));
    let eps = 1e-12 * scale;
    let d1 = orient(p, q, a);
    let d2 = orient(p, q, b);
    let d3 = orient(a, b, p);
    let d4 = orient(a, b, q);
    let s = |x: f64| {
        if x > eps * scale {
            1
        } else if x < -eps * scale {
            -1
        } else {
            0
        }
    };
    let (s1, s2, s3, s4) = (s(d1), s(d2), s(d3), s(d4));
    if s1 * s2 < 0 && s3 * s4 < 0 {
        return true;
    }
    (s1 == 0 && on_segment(p, q, a, eps))
        || (s2 == 0 && on_segment(p, q, b, eps))
        || (s3 == 0 && on_segment(a, b, p, eps))
        || (s4 == 0 && on_segment(a, b, q, eps))
}
