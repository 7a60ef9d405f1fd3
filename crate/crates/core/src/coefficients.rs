//! Diffusion coefficient fields and multiplicative potentials.
//!
//! A [`CoefficientField`] maps a position to a symmetric positive semidefinite
//! matrix. One-dimensional fields only use the `xx` entry of [`Sym2`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const PSD_TOL: f64 = 1e-12;

/// Symmetric 2x2 matrix. In one dimension only `xx` is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 {
        xx: 0.0,
        xy: 0.0,
        yy: 0.0,
    };
    pub const IDENTITY: Sym2 = Sym2 {
        xx: 1.0,
        xy: 0.0,
        yy: 1.0,
    };

    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Sym2 { xx, xy, yy }
    }

    pub fn scalar(c: f64) -> Self {
        Sym2 {
            xx: c,
            xy: 0.0,
            yy: c,
        }
    }

    pub fn diag(xx: f64, yy: f64) -> Self {
        Sym2 { xx, xy: 0.0, yy }
    }

    pub fn scale(self, s: f64) -> Self {
        Sym2 {
            xx: self.xx * s,
            xy: self.xy * s,
            yy: self.yy * s,
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.xx + self.yy);
        let half = 0.5 * (self.xx - self.yy);
        let r = (half * half + self.xy * self.xy).sqrt();
        (mean - r, mean + r)
    }

    /// Quadratic form `e^T C^{-1} e`; `+inf` when `e` is not in the range of `C`.
    pub fn inverse_quad(&self, e: [f64; 2]) -> f64 {
        let det = self.xx * self.yy - self.xy * self.xy;
        let scale = self.xx.abs().max(self.yy.abs());
        if scale <= 0.0 {
            return if e == [0.0, 0.0] { 0.0 } else { f64::INFINITY };
        }
        if det <= PSD_TOL * scale * scale {
            // Singular: finite only along the range direction.
            let (_, lmax) = self.eigenvalues();
            // eigenvector for lmax
            let v = if self.xy.abs() > 0.0 {
                let vx = lmax - self.yy;
                let n = (vx * vx + self.xy * self.xy).sqrt();
                [vx / n, self.xy / n]
            } else if self.xx >= self.yy {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            };
            let along = e[0] * v[0] + e[1] * v[1];
            let perp = [e[0] - along * v[0], e[1] - along * v[1]];
            let perp_n = (perp[0] * perp[0] + perp[1] * perp[1]).sqrt();
            let e_n = (e[0] * e[0] + e[1] * e[1]).sqrt();
            if perp_n > 1e-12 * e_n {
                return f64::INFINITY;
            }
            return along * along / lmax;
        }
        (self.yy * e[0] * e[0] - 2.0 * self.xy * e[0] * e[1] + self.xx * e[1] * e[1]) / det
    }
}

impl std::ops::Add for Sym2 {
    type Output = Sym2;

    fn add(self, o: Sym2) -> Sym2 {
        Sym2 {
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            yy: self.yy + o.yy,
        }
    }
}

/// Where a degenerate field vanishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DegeneracyLocus {
    /// A single point on the real line.
    Point(f64),
    /// The segment `[-halfwidth, halfwidth] x {0}` in the plane.
    Segment { halfwidth: f64 },
}

#[derive(Clone)]
pub enum FieldKind {
    Constant(Sym2),
    /// `(x^2 / (1 + x^2))^delta` on the line.
    CDelta {
        delta: f64,
    },
    /// `(r^2 / (1 + r^2))^delta * I` with `r` the distance to a segment.
    CDeltaInterval {
        delta: f64,
        halfwidth: f64,
    },
    /// Piecewise-linear scalar field on the line, constant beyond the table ends.
    Tabulated {
        xs: Vec<f64>,
        cs: Vec<f64>,
    },
    Sum(Arc<CoefficientField>, Arc<CoefficientField>),
    Scaled(Arc<CoefficientField>, f64),
}

impl std::fmt::Debug for FieldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FieldKind::Constant(c) => write!(f, "Constant({c:?})"),
            FieldKind::CDelta { delta } => write!(f, "CDelta({delta})"),
            FieldKind::CDeltaInterval { delta, halfwidth } => {
                write!(f, "CDeltaInterval({delta}, {halfwidth})")
            }
            FieldKind::Tabulated { xs, .. } => write!(f, "Tabulated({} knots)", xs.len()),
            FieldKind::Sum(a, b) => write!(f, "Sum({:?}, {:?})", a.kind, b.kind),
            FieldKind::Scaled(a, s) => write!(f, "Scaled({:?}, {s})", a.kind),
        }
    }
}

/// Spatially varying diffusion coefficient.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    dim: usize,
    kind: FieldKind,
    upper_bound: f64,
    lower_bound: f64,
    degeneracy_locus: Option<DegeneracyLocus>,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) {
        return Err(LabError::Range {
            name: "delta",
            value: delta,
            range: "[0, 1)",
        });
    }
    Ok(())
}

/// `(s / (1 + s))^delta` with `s = r^2`, with `0^0 = 1`.
fn degenerate_profile(r2: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        return 1.0;
    }
    (r2 / (1.0 + r2)).powf(delta)
}

/// Euclidean distance from `(x, y)` to `[-a, a] x {0}`.
pub fn distance_to_segment(x: f64, y: f64, a: f64) -> f64 {
    let dx = (x.abs() - a).max(0.0);
    (dx * dx + y * y).sqrt()
}

impl CoefficientField {
    pub fn c_delta(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(CoefficientField {
            dim: 1,
            kind: FieldKind::CDelta { delta },
            upper_bound: 1.0,
            lower_bound: if delta > 0.0 { 0.0 } else { 1.0 },
            degeneracy_locus: (delta > 0.0).then_some(DegeneracyLocus::Point(0.0)),
        })
    }

    pub fn c_delta_2d(delta: f64, interval_halfwidth: f64) -> Result<Self> {
        check_delta(delta)?;
        if !(interval_halfwidth > 0.0) || !interval_halfwidth.is_finite() {
            return Err(LabError::Range {
                name: "interval_halfwidth",
                value: interval_halfwidth,
                range: "(0, inf)",
            });
        }
        Ok(CoefficientField {
            dim: 2,
            kind: FieldKind::CDeltaInterval {
                delta,
                halfwidth: interval_halfwidth,
            },
            upper_bound: 1.0,
            lower_bound: if delta > 0.0 { 0.0 } else { 1.0 },
            degeneracy_locus: (delta > 0.0).then_some(DegeneracyLocus::Segment {
                halfwidth: interval_halfwidth,
            }),
        })
    }

    /// Constant field. In one dimension pass `Sym2::scalar(c)`; only `xx` is used.
    pub fn constant(dim: usize, value: Sym2) -> Result<Self> {
        let value = match dim {
            1 => Sym2::scalar(value.xx),
            2 => value,
            _ => {
                return Err(LabError::Dimension {
                    expected: 2,
                    got: dim,
                })
            }
        };
        if !value.xx.is_finite() || !value.xy.is_finite() || !value.yy.is_finite() {
            return Err(LabError::NonFinite("constant coefficient"));
        }
        let (lo, hi) = value.eigenvalues();
        if lo < -PSD_TOL * hi.abs().max(1.0) {
            return Err(LabError::NotPsd(format!(
                "smallest eigenvalue {lo:e} of {value:?}"
            )));
        }
        Ok(CoefficientField {
            dim,
            kind: FieldKind::Constant(value),
            upper_bound: hi,
            lower_bound: lo.max(0.0),
            degeneracy_locus: None,
        })
    }

    pub fn constant_scalar(dim: usize, c: f64) -> Result<Self> {
        Self::constant(dim, Sym2::scalar(c))
    }

    /// Piecewise-linear scalar field on the line through `(xs[i], cs[i])`.
    pub fn tabulated(xs: Vec<f64>, cs: Vec<f64>) -> Result<Self> {
        if xs.len() != cs.len() || xs.is_empty() {
            return Err(LabError::Invalid(format!(
                "tabulated field needs matching non-empty knots, got {} and {}",
                xs.len(),
                cs.len()
            )));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(LabError::Invalid("tabulated knots must increase".into()));
        }
        if let Some(c) = cs.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(LabError::NotPsd(format!("tabulated value {c}")));
        }
        let hi = cs.iter().cloned().fold(0.0, f64::max);
        let lo = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(CoefficientField {
            dim: 1,
            kind: FieldKind::Tabulated { xs, cs },
            upper_bound: hi,
            lower_bound: lo,
            degeneracy_locus: None,
        })
    }

    pub fn sum(a: &CoefficientField, b: &CoefficientField) -> Result<Self> {
        if a.dim != b.dim {
            return Err(LabError::Dimension {
                expected: a.dim,
                got: b.dim,
            });
        }
        Ok(CoefficientField {
            dim: a.dim,
            kind: FieldKind::Sum(Arc::new(a.clone()), Arc::new(b.clone())),
            upper_bound: a.upper_bound + b.upper_bound,
            lower_bound: a.lower_bound + b.lower_bound,
            degeneracy_locus: None,
        })
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(LabError::Range {
                name: "scale",
                value: s,
                range: "[0, inf)",
            });
        }
        Ok(CoefficientField {
            dim: self.dim,
            kind: FieldKind::Scaled(Arc::new(self.clone()), s),
            upper_bound: self.upper_bound * s,
            lower_bound: self.lower_bound * s,
            degeneracy_locus: self.degeneracy_locus.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    /// Essential supremum of the matrix norm.
    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    /// Uniform ellipticity constant, zero for degenerate fields.
    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn degeneracy_locus(&self) -> Option<&DegeneracyLocus> {
        self.degeneracy_locus.as_ref()
    }

    pub fn eval(&self, x: &[f64]) -> Sym2 {
        match &self.kind {
            FieldKind::Constant(c) => *c,
            FieldKind::CDelta { delta } => {
                let c = degenerate_profile(x[0] * x[0], *delta);
                Sym2::scalar(c)
            }
            FieldKind::CDeltaInterval { delta, halfwidth } => {
                let r = distance_to_segment(x[0], x[1], *halfwidth);
                Sym2::scalar(degenerate_profile(r * r, *delta))
            }
            FieldKind::Tabulated { xs, cs } => Sym2::scalar(interpolate(xs, cs, x[0])),
            FieldKind::Sum(a, b) => a.eval(x) + b.eval(x),
            FieldKind::Scaled(a, s) => a.eval(x).scale(*s),
        }
    }

    /// Scalar value for one-dimensional fields.
    pub fn eval_scalar(&self, x: f64) -> f64 {
        self.eval(&[x, 0.0]).xx
    }
}

fn interpolate(xs: &[f64], cs: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return cs[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return cs[last];
    }
    let i = xs.partition_point(|&k| k <= x) - 1;
    let s = (x - xs[i]) / (xs[i + 1] - xs[i]);
    cs[i] + s * (cs[i + 1] - cs[i])
}

#[derive(Debug, Clone)]
pub enum PotentialKind {
    Zero,
    Constant(f64),
    /// `scale * |x|^2`
    Quadratic {
        scale: f64,
    },
    /// Piecewise-linear on the line, constant beyond the ends.
    Tabulated {
        xs: Vec<f64>,
        vs: Vec<f64>,
    },
}

/// Nonnegative multiplication operator added to a form.
#[derive(Debug, Clone)]
pub struct Potential {
    kind: PotentialKind,
    locally_bounded: bool,
    global_sup: Option<f64>,
}

impl Potential {
    pub fn zero() -> Self {
        Potential {
            kind: PotentialKind::Zero,
            locally_bounded: true,
            global_sup: Some(0.0),
        }
    }

    pub fn constant(v: f64) -> Result<Self> {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(LabError::Range {
                name: "potential",
                value: v,
                range: "[0, inf)",
            });
        }
        Ok(Potential {
            kind: PotentialKind::Constant(v),
            locally_bounded: true,
            global_sup: Some(v),
        })
    }

    /// `scale * |x|^2`: locally bounded but without a global bound.
    pub fn quadratic(scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(LabError::Range {
                name: "potential scale",
                value: scale,
                range: "[0, inf)",
            });
        }
        Ok(Potential {
            kind: PotentialKind::Quadratic { scale },
            locally_bounded: true,
            global_sup: if scale == 0.0 { Some(0.0) } else { None },
        })
    }

    pub fn tabulated(xs: Vec<f64>, vs: Vec<f64>) -> Result<Self> {
        if xs.len() != vs.len() || xs.is_empty() || xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(LabError::Invalid("tabulated potential knots".into()));
        }
        if vs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(LabError::Invalid("tabulated potential must be >= 0".into()));
        }
        let sup = vs.iter().cloned().fold(0.0, f64::max);
        Ok(Potential {
            kind: PotentialKind::Tabulated { xs, vs },
            locally_bounded: true,
            global_sup: Some(sup),
        })
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn locally_bounded(&self) -> bool {
        self.locally_bounded
    }

    pub fn global_sup(&self) -> Option<f64> {
        self.global_sup
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Constant(v) => *v,
            PotentialKind::Quadratic { scale } => scale * x.iter().map(|v| v * v).sum::<f64>(),
            PotentialKind::Tabulated { xs, vs } => interpolate(xs, vs, x[0]),
        }
    }
}
