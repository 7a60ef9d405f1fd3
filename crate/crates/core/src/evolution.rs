//! Heat semigroup `exp(-tH)` and wave cosine family `cos(t H^{1/2})` for the
//! node-measure-normalized operator `H = M^{-1} (L + V)` of a discrete form.
//!
//! Three solvers are available. The dense spectral path diagonalizes the
//! symmetrized matrix and is exact up to rounding; Lanczos handles large grids
//! with absolute accuracy; uniformization expands `exp(-tH)` as a Poisson
//! mixture of powers of a nonnegative matrix, so every term is nonnegative and
//! tiny values keep their relative accuracy. Inner-product traces use the
//! last one and are stored as natural logarithms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::form::DiscreteForm;
use crate::region::RegionSet;

const PAR_THRESHOLD: usize = 32_768;
/// Largest node count handled by the dense path in automatic selection.
pub const DENSE_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    DenseSpectral,
    Krylov,
    Uniformization,
}

impl SolverKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::DenseSpectral => "dense-spectral",
            SolverKind::Krylov => "krylov",
            SolverKind::Uniformization => "uniformization",
        }
    }
}

/// Requested solver; `Auto` picks by size and cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    Auto,
    Fixed(SolverKind),
}

/// `H = M^{-1} K` in compressed rows, `K = L + V`.
#[derive(Debug, Clone)]
pub struct Operator {
    mu: Vec<f64>,
    diag: Vec<f64>,
    start: Vec<usize>,
    cols: Vec<usize>,
    w: Vec<f64>,
}

impl Operator {
    pub fn new(form: &DiscreteForm) -> Self {
        let n = form.n_nodes();
        let mu = form.grid().node_measures();
        let mut diag = match form.node_potential() {
            Some(p) => p.to_vec(),
            None => vec![0.0; n],
        };
        let mut deg = vec![0usize; n + 1];
        for (e, w) in form.edges().iter().zip(form.weights()) {
            if *w > 0.0 {
                deg[e.u + 1] += 1;
                deg[e.v + 1] += 1;
            }
        }
        for i in 0..n {
            deg[i + 1] += deg[i];
        }
        let mut fill = deg.clone();
        let mut cols = vec![0; deg[n]];
        let mut ws = vec![0.0; deg[n]];
        for (e, w) in form.edges().iter().zip(form.weights()) {
            if *w > 0.0 {
                diag[e.u] += w;
                diag[e.v] += w;
                cols[fill[e.u]] = e.v;
                ws[fill[e.u]] = *w;
                fill[e.u] += 1;
                cols[fill[e.v]] = e.u;
                ws[fill[e.v]] = *w;
                fill[e.v] += 1;
            }
        }
        Operator {
            mu,
            diag,
            start: deg,
            cols,
            w: ws,
        }
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn measures(&self) -> &[f64] {
        &self.mu
    }

    fn nnz(&self) -> usize {
        self.cols.len() + self.n()
    }

    fn row_k(&self, i: usize, x: &[f64]) -> f64 {
        let mut s = self.diag[i] * x[i];
        for k in self.start[i]..self.start[i + 1] {
            s -= self.w[k] * x[self.cols[k]];
        }
        s
    }

    fn for_rows<F: Fn(usize) -> f64 + Sync + Send>(&self, y: &mut [f64], f: F) {
        if y.len() >= PAR_THRESHOLD {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = f(i));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = f(i);
            }
        }
    }

    /// `y = H x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.for_rows(y, |i| self.row_k(i, x) / self.mu[i]);
    }

    /// `y = M^{-1/2} K M^{-1/2} x`, the symmetric form of `H`.
    fn apply_sym(&self, x: &[f64], y: &mut [f64], scratch: &mut [f64]) {
        for i in 0..x.len() {
            scratch[i] = x[i] / self.mu[i].sqrt();
        }
        let s: &[f64] = scratch;
        self.for_rows(y, |i| self.row_k(i, s) / self.mu[i].sqrt());
    }

    /// Largest diagonal entry of `H`; the uniformization rate.
    pub fn max_rate(&self) -> f64 {
        self.diag
            .iter()
            .zip(&self.mu)
            .map(|(d, m)| d / m)
            .fold(0.0, f64::max)
    }

    /// Gershgorin upper bound on the spectrum of `H` (row sums of `|H|`).
    pub fn gershgorin(&self) -> f64 {
        (0..self.n())
            .map(|i| {
                let off: f64 = self.w[self.start[i]..self.start[i + 1]].iter().sum();
                (self.diag[i] + off) / self.mu[i]
            })
            .fold(0.0, f64::max)
    }

    fn symmetric_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = self.diag[i] / self.mu[i];
            for k in self.start[i]..self.start[i + 1] {
                let j = self.cols[k];
                a[(i, j)] -= self.w[k] / (self.mu[i] * self.mu[j]).sqrt();
            }
        }
        a
    }

    /// One step of the jump chain, `y = (I - H / rate) x`, entrywise nonnegative.
    fn jump(&self, rate: f64, x: &[f64], y: &mut [f64]) {
        self.for_rows(y, |i| {
            let s = self.mu[i] * rate;
            let mut v = (1.0 - self.diag[i] / s).max(0.0) * x[i];
            for k in self.start[i]..self.start[i + 1] {
                v += self.w[k] / s * x[self.cols[k]];
            }
            v
        });
    }
}

fn check_vec(op: &Operator, phi: &[f64]) -> Result<()> {
    if phi.len() != op.n() {
        return Err(LabError::GridMismatch(format!(
            "vector has {} entries for {} nodes",
            phi.len(),
            op.n()
        )));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("phi"));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(LabError::Range {
            name: "tol",
            value: tol,
            range: "(0, inf)",
        });
    }
    Ok(())
}

/// Eigendecomposition of the symmetrized operator; exact small-grid oracle.
#[derive(Debug, Clone)]
pub struct DenseSpectral {
    sqrt_mu: Vec<f64>,
    eigenvalues: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl DenseSpectral {
    pub fn new(form: &DiscreteForm) -> Self {
        Self::from_operator(&Operator::new(form))
    }

    pub fn from_operator(op: &Operator) -> Self {
        let eig = SymmetricEigen::new(op.symmetric_dense());
        DenseSpectral {
            sqrt_mu: op.mu.iter().map(|m| m.sqrt()).collect(),
            eigenvalues: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
            vectors: eig.eigenvectors,
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Coefficients of `phi` in the orthonormal eigenbasis of `L2(mu)`.
    fn coefficients(&self, phi: &[f64]) -> DVector<f64> {
        let y =
            DVector::from_iterator(phi.len(), phi.iter().zip(&self.sqrt_mu).map(|(p, s)| p * s));
        self.vectors.tr_mul(&y)
    }

    /// `f(H) phi`.
    pub fn apply_fn<F: Fn(f64) -> f64>(&self, f: F, phi: &[f64]) -> Vec<f64> {
        let mut c = self.coefficients(phi);
        for (ci, l) in c.iter_mut().zip(&self.eigenvalues) {
            *ci *= f(*l);
        }
        let y = &self.vectors * c;
        y.iter().zip(&self.sqrt_mu).map(|(v, s)| v / s).collect()
    }

    pub fn exp(&self, t: f64, phi: &[f64]) -> Vec<f64> {
        self.apply_fn(|l| (-t * l).exp(), phi)
    }

    pub fn cos(&self, t: f64, phi: &[f64]) -> Vec<f64> {
        let t = t.abs();
        self.apply_fn(|l| (t * l.sqrt()).cos(), phi)
    }

    /// `(a, exp(-tH) b)` in `L2(mu)`.
    pub fn inner(&self, t: f64, a: &[f64], b: &[f64]) -> f64 {
        let ca = self.coefficients(a);
        let cb = self.coefficients(b);
        ca.iter()
            .zip(cb.iter())
            .zip(&self.eigenvalues)
            .map(|((x, y), l)| x * y * (-t * l).exp())
            .sum()
    }
}

/// `(a, b)` in `L2(mu)`.
pub fn inner_mu(mu: &[f64], a: &[f64], b: &[f64]) -> f64 {
    mu.iter().zip(a).zip(b).map(|((m, x), y)| m * x * y).sum()
}

/// `L2(mu)` norm.
pub fn norm_mu(mu: &[f64], a: &[f64]) -> f64 {
    inner_mu(mu, a, a).sqrt()
}

const LANCZOS_MAX: usize = 160;

/// `exp(-tau S) y` by Lanczos with full reorthogonalization; `None` when the
/// subspace of size `LANCZOS_MAX` is not enough for `tol`.
fn lanczos_exp(op: &Operator, tau: f64, y: &[f64], tol: f64) -> Option<Vec<f64>> {
    let n = y.len();
    let beta0 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if beta0 == 0.0 {
        return Some(vec![0.0; n]);
    }
    let mut basis: Vec<Vec<f64>> = vec![y.iter().map(|v| v / beta0).collect()];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let m_cap = LANCZOS_MAX.min(n);
    loop {
        let j = basis.len() - 1;
        op.apply_sym(&basis[j], &mut w, &mut scratch);
        let a: f64 = w.iter().zip(&basis[j]).map(|(x, y)| x * y).sum();
        alpha.push(a);
        // Full reorthogonalization, twice.
        for _ in 0..2 {
            for q in &basis {
                let c: f64 = w.iter().zip(q).map(|(x, y)| x * y).sum();
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let m = alpha.len();
        let (coef, last) = small_exp(&alpha, &beta, tau);
        let breakdown = b <= 1e-13 * alpha.iter().fold(1e-300f64, |s, a| s.max(a.abs()));
        // Generalized residual; exp alone underestimates when tau*alpha is large.
        let err = beta0 * b * tau * last.abs();
        if breakdown || err <= tol || m >= m_cap {
            if !(breakdown || err <= tol) {
                return None;
            }
            let mut out = vec![0.0; n];
            for (q, c) in basis.iter().zip(coef.iter()) {
                for (o, qi) in out.iter_mut().zip(q) {
                    *o += beta0 * c * qi;
                }
            }
            return Some(out);
        }
        beta.push(b);
        basis.push(w.iter().map(|v| v / b).collect());
    }
}

/// `exp(-tau T) e_1` for the tridiagonal `T`, and the last entry of `phi_1(-tau T) e_1`.
fn small_exp(alpha: &[f64], beta: &[f64], tau: f64) -> (Vec<f64>, f64) {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut out = vec![0.0; m];
    let mut last = 0.0;
    for k in 0..m {
        let z = tau * eig.eigenvalues[k];
        let s = eig.eigenvectors[(0, k)] * (-z).exp();
        for i in 0..m {
            out[i] += eig.eigenvectors[(i, k)] * s;
        }
        let phi1 = if z.abs() < 1e-8 {
            1.0 - 0.5 * z
        } else {
            -(-z).exp_m1() / z
        };
        last += eig.eigenvectors[(m - 1, k)] * eig.eigenvectors[(0, k)] * phi1;
    }
    (out, last)
}

fn krylov_exp(op: &Operator, t: f64, phi: &[f64], tol: f64) -> Result<Vec<f64>> {
    let sq: Vec<f64> = op.mu.iter().map(|m| m.sqrt()).collect();
    let mut y: Vec<f64> = phi.iter().zip(&sq).map(|(p, s)| p * s).collect();
    let mut remaining = t;
    let rate = op.gershgorin().max(1e-300);
    // Initial step sized so that a subspace of moderate dimension suffices.
    let mut tau = t.min(400.0 / rate).max(t * 1e-9);
    let mut steps = 0usize;
    while remaining > 0.0 {
        let h = tau.min(remaining);
        let local_tol = tol * h / t;
        match lanczos_exp(op, h, &y, local_tol) {
            Some(next) => {
                y = next;
                remaining -= h;
                steps += 1;
                tau *= 1.25;
            }
            None => {
                tau *= 0.5;
                if tau < t * 1e-9 {
                    return Err(LabError::Solver {
                        iterations: steps,
                        residual: remaining / t,
                    });
                }
            }
        }
        if steps > 1_000_000 {
            return Err(LabError::Solver {
                iterations: steps,
                residual: remaining / t,
            });
        }
    }
    Ok(y.iter().zip(&sq).map(|(v, s)| v / s).collect())
}

/// Poisson weights `log P(N = k)` for `N ~ Poisson(m)`, advanced one `k` at a time.
#[derive(Debug, Clone, Copy)]
struct PoissonLog {
    ln_m: f64,
    current: f64,
    k: usize,
}

impl PoissonLog {
    fn new(m: f64) -> Self {
        PoissonLog {
            ln_m: m.ln(),
            current: -m,
            k: 0,
        }
    }

    fn advance(&mut self) {
        self.k += 1;
        self.current += self.ln_m - (self.k as f64).ln();
    }

    /// Upper bound on `ln P(N > k)` once `k + 2 > m`.
    fn ln_tail(&self, m: f64) -> f64 {
        let k = self.k as f64;
        if k + 2.0 <= m {
            return 0.0;
        }
        let next = self.current + self.ln_m - (k + 1.0).ln();
        next - (1.0 - m / (k + 2.0)).ln()
    }
}

fn uniformized_apply(op: &Operator, t: f64, phi: &[f64], tol: f64) -> Result<Vec<f64>> {
    let rate = op.max_rate();
    if rate == 0.0 || t == 0.0 {
        return Ok(phi.to_vec());
    }
    let m = rate * t;
    let sup = phi.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let total: f64 = op.mu.iter().sum();
    let mut pk = phi.to_vec();
    let mut next = vec![0.0; phi.len()];
    let mut out = vec![0.0; phi.len()];
    let mut pois = PoissonLog::new(m);
    let cap = (m + 40.0 * m.sqrt() + 1000.0) as usize * 4;
    loop {
        let wk = pois.current.exp();
        if wk > 0.0 {
            for (o, p) in out.iter_mut().zip(&pk) {
                *o += wk * p;
            }
        }
        // Tail in L2(mu): ||sum_{k>K}|| <= Q(K) sup|phi| |X|^{1/2}.
        let tail = pois.ln_tail(m) + sup.max(1e-300).ln() + 0.5 * total.ln();
        if pois.k as f64 > m && tail <= tol.ln() {
            return Ok(out);
        }
        if pois.k > cap {
            return Err(LabError::Solver {
                iterations: pois.k,
                residual: tail.exp(),
            });
        }
        op.jump(rate, &pk, &mut next);
        std::mem::swap(&mut pk, &mut next);
        pois.advance();
    }
}

/// `exp(-tH) phi` to accuracy `tol` in `L2(mu)`.
pub fn apply_semigroup(form: &DiscreteForm, t: f64, phi: &[f64], tol: f64) -> Result<Vec<f64>> {
    apply_semigroup_with(form, t, phi, tol, Solver::Auto).map(|(v, _)| v)
}

pub fn apply_semigroup_with(
    form: &DiscreteForm,
    t: f64,
    phi: &[f64],
    tol: f64,
    solver: Solver,
) -> Result<(Vec<f64>, SolverKind)> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(LabError::Range {
            name: "t",
            value: t,
            range: "(0, inf)",
        });
    }
    check_tol(tol)?;
    let op = Operator::new(form);
    check_vec(&op, phi)?;
    let kind = match solver {
        Solver::Fixed(k) => k,
        Solver::Auto if op.n() <= DENSE_LIMIT => SolverKind::DenseSpectral,
        Solver::Auto => SolverKind::Krylov,
    };
    if op.max_rate() == 0.0 {
        return Ok((phi.to_vec(), kind));
    }
    let out = match kind {
        SolverKind::DenseSpectral => DenseSpectral::from_operator(&op).exp(t, phi),
        SolverKind::Krylov => krylov_exp(&op, t, phi, tol)?,
        SolverKind::Uniformization => uniformized_apply(&op, t, phi, tol)?,
    };
    Ok((out, kind))
}

/// Inner products `(1_A, exp(-tH) 1_B)` on a time grid. Values are stored as
/// natural logarithms; `-inf` marks a value below floating-point range.
#[derive(Debug, Clone, Serialize)]
pub struct SemigroupTrace {
    pub times: Vec<f64>,
    pub log_values: Vec<f64>,
    /// Natural log of the absolute error bound per value.
    pub log_error_bounds: Vec<f64>,
    pub solver: SolverKind,
}

impl SemigroupTrace {
    /// Values in linear scale (may underflow to 0).
    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }

    pub fn error_bounds(&self) -> Vec<f64> {
        self.log_error_bounds.iter().map(|v| v.exp()).collect()
    }

    /// Whether point `i` is resolved, i.e. well above its error bound.
    pub fn resolved(&self, i: usize) -> bool {
        self.log_values[i].is_finite() && self.log_values[i] > self.log_error_bounds[i] + 10f64.ln()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub solver: Solver,
    /// Relative accuracy for uniformization, absolute for the other solvers.
    pub tol: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            solver: Solver::Auto,
            tol: 1e-10,
        }
    }
}

/// Work estimate of uniformization (node-edge updates) above which the
/// automatic choice falls back to the other solvers.
const UNIFORMIZATION_BUDGET: f64 = 4e10;

pub fn trace_inner_products(
    form: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    times: &[f64],
) -> Result<SemigroupTrace> {
    trace_inner_products_with(form, a, b, times, TraceOptions::default())
}

pub fn trace_inner_products_with(
    form: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    times: &[f64],
    opts: TraceOptions,
) -> Result<SemigroupTrace> {
    if a.is_empty() {
        return Err(LabError::EmptyRegion("A"));
    }
    if b.is_empty() {
        return Err(LabError::EmptyRegion("B"));
    }
    if times.is_empty() {
        return Err(LabError::Invalid("empty time list".into()));
    }
    for w in times.windows(2) {
        if !(w[0] < w[1]) {
            return Err(LabError::Invalid("times must be strictly ascending".into()));
        }
    }
    if !(times[0] > 0.0) || !times[times.len() - 1].is_finite() {
        return Err(LabError::Range {
            name: "t",
            value: times[0],
            range: "(0, inf)",
        });
    }
    check_tol(opts.tol)?;
    let op = Operator::new(form);
    let n = op.n();
    if a.indices().iter().chain(b.indices()).any(|&i| i >= n) {
        return Err(LabError::GridMismatch("region index beyond grid".into()));
    }
    let t_max = times[times.len() - 1];
    let kind = match opts.solver {
        Solver::Fixed(k) => k,
        Solver::Auto => {
            let work = 0.5 * op.max_rate() * t_max * op.nnz() as f64;
            if work <= UNIFORMIZATION_BUDGET {
                SolverKind::Uniformization
            } else if n <= DENSE_LIMIT {
                SolverKind::DenseSpectral
            } else {
                SolverKind::Krylov
            }
        }
    };
    let ia = a.indicator(n);
    let ib = b.indicator(n);
    let (log_values, log_error_bounds) = match kind {
        SolverKind::Uniformization => uniformized_trace(&op, &ia, &ib, times, opts.tol)?,
        SolverKind::DenseSpectral => {
            let ds = DenseSpectral::from_operator(&op);
            let scale = (a.measure() * b.measure()).sqrt();
            let err = (1e-13 * scale * n as f64).ln();
            times
                .iter()
                .map(|&t| (ds.inner(t, &ia, &ib).max(0.0).ln(), err))
                .unzip()
        }
        SolverKind::Krylov => {
            let res: Vec<Result<(f64, f64)>> = times
                .par_iter()
                .map(|&t| {
                    let tol = opts.tol;
                    let ua = krylov_exp(&op, 0.5 * t, &ia, tol)?;
                    let ub = krylov_exp(&op, 0.5 * t, &ib, tol)?;
                    let v = inner_mu(&op.mu, &ua, &ub);
                    let err = tol * (norm_mu(&op.mu, &ua) + norm_mu(&op.mu, &ub)) + tol * tol;
                    Ok((v.max(0.0).ln(), err.ln()))
                })
                .collect();
            res.into_iter()
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip()
        }
    };
    Ok(SemigroupTrace {
        times: times.to_vec(),
        log_values,
        log_error_bounds,
        solver: kind,
    })
}

/// `ln sum_n mu_n u_n w_n`, falling back to a log-domain sum when the plain
/// sum underflows.
fn log_inner(ln_mu: &[f64], u: &[f64], w: &[f64]) -> f64 {
    let plain: f64 = if u.len() >= PAR_THRESHOLD {
        // Fixed chunks keep the summation order independent of scheduling.
        let parts: Vec<f64> = u
            .par_chunks(4096)
            .zip(w.par_chunks(4096))
            .zip(ln_mu.par_chunks(4096))
            .map(|((x, y), m)| {
                x.iter()
                    .zip(y)
                    .zip(m)
                    .map(|((x, y), m)| m.exp() * x * y)
                    .sum()
            })
            .collect();
        parts.iter().sum()
    } else {
        u.iter()
            .zip(w)
            .zip(ln_mu)
            .map(|((x, y), m)| m.exp() * x * y)
            .sum()
    };
    if plain > 1e-200 {
        return plain.ln();
    }
    let mut best = f64::NEG_INFINITY;
    let terms: Vec<f64> = u
        .iter()
        .zip(w)
        .zip(ln_mu)
        .filter(|((x, y), _)| **x > 0.0 && **y > 0.0)
        .map(|((x, y), m)| {
            let l = m + x.ln() + y.ln();
            best = best.max(l);
            l
        })
        .collect();
    if best == f64::NEG_INFINITY {
        return best;
    }
    best + terms.iter().map(|l| (l - best).exp()).sum::<f64>().ln()
}

/// Half-time split `(1_A, S_t 1_B) = (S_{t/2} 1_A, S_{t/2} 1_B)`, with all
/// times sharing one sequence of jump-chain powers.
fn uniformized_trace(
    op: &Operator,
    ia: &[f64],
    ib: &[f64],
    times: &[f64],
    rtol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = op.n();
    let rate = op.max_rate();
    let ln_mu: Vec<f64> = op.mu.iter().map(|m| m.ln()).collect();
    let total: f64 = op.mu.iter().sum();
    if rate == 0.0 {
        let v = log_inner(&ln_mu, ia, ib);
        return Ok((vec![v; times.len()], vec![v + 1e-15f64.ln(); times.len()]));
    }
    let ms: Vec<f64> = times.iter().map(|t| 0.5 * rate * t).collect();
    let mut pois: Vec<PoissonLog> = ms.iter().map(|&m| PoissonLog::new(m)).collect();
    let mut ua = vec![vec![0.0; n]; times.len()];
    let mut ub = vec![vec![0.0; n]; times.len()];
    let mut done = vec![false; times.len()];
    let mut out_v = vec![f64::NEG_INFINITY; times.len()];
    let mut out_e = vec![f64::NEG_INFINITY; times.len()];
    let mut last_est = vec![f64::INFINITY; times.len()];
    let mut pa = ia.to_vec();
    let mut pb = ib.to_vec();
    let mut na = vec![0.0; n];
    let mut nb = vec![0.0; n];
    let ln3x = (3.0 * total).ln();
    let m_max = ms[ms.len() - 1];
    let cap = ((m_max + 60.0 * m_max.sqrt() + 2000.0) * 4.0) as usize;
    let mut k = 0usize;
    loop {
        let mut all_done = true;
        for i in 0..times.len() {
            if done[i] {
                continue;
            }
            all_done = false;
            let wk = pois[i].current.exp();
            if wk > 0.0 {
                axpy_nonneg(wk, &pa, &mut ua[i]);
                axpy_nonneg(wk, &pb, &mut ub[i]);
            }
            // The running estimate only grows, so a check is pointless until
            // the tail bound drops below the previous estimate.
            let tail = pois[i].ln_tail(ms[i]) + ln3x;
            if (k as f64) > ms[i]
                && k.is_multiple_of(8)
                && (last_est[i] == f64::NEG_INFINITY || tail <= rtol.ln() + last_est[i])
            {
                let est = log_inner(&ln_mu, &ua[i], &ub[i]);
                last_est[i] = est;
                if tail <= rtol.ln() + est {
                    done[i] = true;
                    out_v[i] = est;
                    out_e[i] = (tail.exp() + 4.0 * f64::EPSILON * (k as f64 + 1.0) * est.exp())
                        .ln()
                        .max(tail)
                        .max(est + (4.0 * f64::EPSILON * (k as f64 + 1.0)).ln());
                } else if tail < -1400.0 && est == f64::NEG_INFINITY {
                    // Nothing representable has arrived; the value is below range.
                    done[i] = true;
                    out_e[i] = tail;
                }
            }
            pois[i].advance();
        }
        if all_done {
            break;
        }
        if k > cap {
            return Err(LabError::Solver {
                iterations: k,
                residual: f64::NAN,
            });
        }
        rayon::join(
            || op.jump(rate, &pa, &mut na),
            || op.jump(rate, &pb, &mut nb),
        );
        std::mem::swap(&mut pa, &mut na);
        std::mem::swap(&mut pb, &mut nb);
        k += 1;
    }
    Ok((out_v, out_e))
}

fn axpy_nonneg(a: f64, x: &[f64], y: &mut [f64]) {
    if y.len() >= PAR_THRESHOLD {
        y.par_iter_mut()
            .zip(x.par_iter())
            .for_each(|(yi, xi)| *yi += a * xi);
    } else {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }
}

/// Spectral upper bound used by the polynomial recurrences: Gershgorin times 1.05.
pub fn spectral_bound(form: &DiscreteForm) -> f64 {
    1.05 * Operator::new(form).gershgorin()
}

/// Chebyshev coefficients of `f` on `[0, rho]`, truncated once the tail is below
/// `tol` (relative to the largest coefficient).
fn chebyshev_coefficients<F: Fn(f64) -> f64>(
    f: &F,
    rho: f64,
    tol: f64,
    hint: usize,
) -> Result<Vec<f64>> {
    let mut nn = hint.next_power_of_two().max(64);
    loop {
        // cos(j theta_k) with theta_k = pi (k + 1/2) / nn, via a table of
        // cos(pi m / (2 nn)) indexed by j (2k + 1) mod 4 nn.
        let table: Vec<f64> = (0..4 * nn)
            .map(|m| (std::f64::consts::PI * m as f64 / (2 * nn) as f64).cos())
            .collect();
        let fk: Vec<f64> = (0..nn)
            .map(|k| {
                let y = table[2 * k + 1];
                f(0.5 * rho * (1.0 + y))
            })
            .collect();
        let c: Vec<f64> = (0..nn)
            .into_par_iter()
            .map(|j| {
                let mut s = 0.0;
                for (k, fv) in fk.iter().enumerate() {
                    s += fv * table[(j * (2 * k + 1)) % (4 * nn)];
                }
                2.0 * s / nn as f64
            })
            .collect();
        let cmax = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let fmax = fk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // The sums carry rounding noise of order eps sqrt(nn) max|f|.
        let noise = 32.0 * f64::EPSILON * (nn as f64).sqrt() * fmax;
        let thresh = (1e-3 * tol * cmax).max(noise);
        let quarter = nn - nn / 4;
        let tail = c[quarter..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if tail <= thresh {
            let mut last = nn;
            while last > 1 && c[last - 1].abs() <= thresh {
                last -= 1;
            }
            return Ok(c[..last.max(1)].to_vec());
        }
        if nn >= 1 << 16 {
            return Err(LabError::Solver {
                iterations: nn,
                residual: tail / cmax,
            });
        }
        nn *= 2;
    }
}

/// `f(H) phi` for `f` smooth on `[0, rho]` by Clenshaw summation.
fn chebyshev_apply<F: Fn(f64) -> f64>(
    op: &Operator,
    rho: f64,
    f: F,
    phi: &[f64],
    tol: f64,
    hint: usize,
) -> Result<Vec<f64>> {
    let c = chebyshev_coefficients(&f, rho, tol, hint)?;
    let n = phi.len();
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut hb = vec![0.0; n];
    // Y = (2 / rho) H - I
    for j in (1..c.len()).rev() {
        op.apply(&b1, &mut hb);
        let mut b0 = vec![0.0; n];
        for i in 0..n {
            let y = 2.0 / rho * hb[i] - b1[i];
            b0[i] = c[j] * phi[i] + 2.0 * y - b2[i];
        }
        b2 = std::mem::replace(&mut b1, b0);
    }
    op.apply(&b1, &mut hb);
    Ok((0..n)
        .map(|i| 0.5 * c[0] * phi[i] + (2.0 / rho * hb[i] - b1[i]) - b2[i])
        .collect())
}

/// `cos(t H^{1/2}) phi` by a Chebyshev expansion on `[0, rho]`, `rho` the
/// Gershgorin bound with a 5% margin. Even in `t` by construction.
pub fn apply_cosine(form: &DiscreteForm, t: f64, phi: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_tol(tol)?;
    if !t.is_finite() {
        return Err(LabError::NonFinite("t"));
    }
    let op = Operator::new(form);
    check_vec(&op, phi)?;
    let t = t.abs();
    let rho = 1.05 * op.gershgorin();
    if t == 0.0 || rho == 0.0 {
        return Ok(phi.to_vec());
    }
    if !rho.is_finite() {
        return Err(LabError::Invalid(
            "spectral bound estimate is not finite".into(),
        ));
    }
    let hint = (2.0 * t * rho.sqrt()) as usize + 64;
    chebyshev_apply(&op, rho, |x| (t * x.max(0.0).sqrt()).cos(), phi, tol, hint)
}

/// Relative `L2(mu)` mass of `cos(t H^{1/2}) 1_A` at nodes farther than
/// `radius` (Euclidean) from `A`.
pub fn leakage_beyond(
    form: &DiscreteForm,
    a: &RegionSet,
    t: f64,
    radius: f64,
    tol: f64,
) -> Result<f64> {
    if a.is_empty() {
        return Err(LabError::EmptyRegion("A"));
    }
    let grid = form.grid();
    let n = form.n_nodes();
    let phi = a.indicator(n);
    let u = apply_cosine(form, t, &phi, tol)?;
    let dist = a.euclidean_distance_field(grid);
    let mu = grid.node_measures();
    let outside: Vec<f64> = u
        .iter()
        .zip(&dist)
        .map(|(v, d)| if *d > radius { *v } else { 0.0 })
        .collect();
    Ok(norm_mu(&mu, &outside) / norm_mu(&mu, &phi))
}

/// Leakage beyond the light cone `lambda^{1/2} t + 3 dx`, with `lambda` the
/// form's bound and `dx` the coarsest spacing.
pub fn propagation_leakage(form: &DiscreteForm, a: &RegionSet, t: f64, tol: f64) -> Result<f64> {
    let radius = form.lambda_bound().sqrt() * t.abs() + 3.0 * form.grid().max_spacing();
    leakage_beyond(form, a, t, radius, tol)
}

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = mid - half * z;
        x[n - 1 - i] = mid + half * z;
        w[i] = half * wi;
        w[n - 1 - i] = half * wi;
    }
    (x, w)
}

/// Safety factor on the truncation point of the subordination integral.
pub const SUBORDINATION_SAFETY: f64 = 0.5;

/// Relative `L2(mu)` discrepancy between `exp(-tH) phi` and the Gauss–Legendre
/// quadrature of `(pi t)^{-1/2} int_0^smax exp(-s^2/4t) cos(s H^{1/2}) phi ds`.
pub fn check_subordination(
    form: &DiscreteForm,
    t: f64,
    phi: &[f64],
    quad_points: usize,
) -> Result<f64> {
    if quad_points < 8 {
        return Err(LabError::Range {
            name: "quad_points",
            value: quad_points as f64,
            range: "[8, inf)",
        });
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(LabError::Range {
            name: "t",
            value: t,
            range: "(0, inf)",
        });
    }
    let op = Operator::new(form);
    check_vec(&op, phi)?;
    let s_max = 8.0 * t.sqrt() * (1.0 + SUBORDINATION_SAFETY);
    let (s, w) = gauss_legendre(quad_points, 0.0, s_max);
    let norm = (std::f64::consts::PI * t).sqrt();
    let kernel: Vec<f64> = s
        .iter()
        .zip(&w)
        .map(|(si, wi)| wi * (-si * si / (4.0 * t)).exp() / norm)
        .collect();
    // The quadrature is linear in the cosine family, so it is evaluated as one
    // scalar function of H.
    let quad = |x: f64| -> f64 {
        let r = x.max(0.0).sqrt();
        s.iter()
            .zip(&kernel)
            .map(|(si, k)| k * (si * r).cos())
            .sum()
    };
    let (lhs, rhs) = if op.n() <= DENSE_LIMIT {
        let ds = DenseSpectral::from_operator(&op);
        (ds.exp(t, phi), ds.apply_fn(quad, phi))
    } else {
        let rho = 1.05 * op.gershgorin();
        let lhs = apply_semigroup_with(form, t, phi, 1e-13, Solver::Fixed(SolverKind::Krylov))?.0;
        let hint = (2.0 * s_max * rho.sqrt()) as usize + 64;
        (lhs, chebyshev_apply(&op, rho, quad, phi, 1e-13, hint)?)
    };
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let den = norm_mu(&op.mu, &lhs);
    if den == 0.0 {
        return Ok(norm_mu(&op.mu, &diff));
    }
    Ok(norm_mu(&op.mu, &diff) / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientField;
    use crate::form::{assemble, laplacian};
    use crate::mesh::Grid;

    fn unit(lo: f64, hi: f64, n: usize) -> DiscreteForm {
        laplacian(&Grid::new_1d(lo, hi, n).unwrap())
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_form_is_identity() {
        let g = Grid::new_1d(0.0, 1.0, 16).unwrap();
        let z = assemble(
            &CoefficientField::constant_scalar(1, 0.0).unwrap(),
            &g,
            None,
        )
        .unwrap();
        let phi: Vec<f64> = (0..17).map(|i| (i as f64).sin()).collect();
        assert_eq!(apply_semigroup(&z, 0.3, &phi, 1e-10).unwrap(), phi);
        assert_eq!(apply_cosine(&z, 2.0, &phi, 1e-10).unwrap(), phi);
        assert!(check_subordination(&z, 0.1, &phi, 64).unwrap() < 1e-14);
    }

    #[test]
    fn solvers_agree() {
        let f = unit(-1.0, 1.0, 64);
        let phi: Vec<f64> = (0..65).map(|i| ((i as f64) * 0.37).sin()).collect();
        let ds = DenseSpectral::new(&f);
        for t in [1e-4, 1e-2, 0.3] {
            let exact = ds.exp(t, &phi);
            for kind in [SolverKind::Krylov, SolverKind::Uniformization] {
                let (got, k) =
                    apply_semigroup_with(&f, t, &phi, 1e-11, Solver::Fixed(kind)).unwrap();
                assert_eq!(k, kind);
                assert!(max_diff(&got, &exact) < 1e-9, "{kind:?} t={t}");
            }
        }
    }

    #[test]
    fn conservative_and_rejects_bad_input() {
        let f = unit(-1.0, 1.0, 32);
        let ones = vec![1.0; 33];
        let out = apply_semigroup(&f, 0.5, &ones, 1e-12).unwrap();
        assert!(max_diff(&out, &ones) < 1e-10);
        assert!(apply_semigroup(&f, 0.0, &ones, 1e-12).is_err());
        assert!(apply_semigroup(&f, 0.1, &ones, 0.0).is_err());
        assert!(apply_semigroup(&f, 0.1, &ones[..3], 1e-6).is_err());
    }

    #[test]
    fn cosine_matches_dense_and_is_even() {
        let f = unit(-1.0, 1.0, 48);
        let phi: Vec<f64> = (0..49)
            .map(|i| (-(i as f64 - 24.0).powi(2) / 10.0).exp())
            .collect();
        let ds = DenseSpectral::new(&f);
        for t in [0.0, 0.05, 0.4, 1.3] {
            let got = apply_cosine(&f, t, &phi, 1e-12).unwrap();
            assert!(max_diff(&got, &ds.cos(t, &phi)) < 1e-9);
            assert_eq!(got, apply_cosine(&f, -t, &phi, 1e-12).unwrap());
        }
        assert_eq!(apply_cosine(&f, 0.0, &phi, 1e-9).unwrap(), phi);
    }

    #[test]
    fn traces_agree_across_solvers() {
        let g = Grid::new_1d(-2.0, 2.0, 64).unwrap();
        let f = assemble(&CoefficientField::c_delta(0.25).unwrap(), &g, None).unwrap();
        let a = RegionSet::interval(&g, -1.5, -1.0).unwrap();
        let b = RegionSet::interval(&g, 1.0, 1.5).unwrap();
        let times = [0.05, 0.1, 0.4, 1.0];
        let u = trace_inner_products_with(
            &f,
            &a,
            &b,
            &times,
            TraceOptions {
                solver: Solver::Fixed(SolverKind::Uniformization),
                tol: 1e-12,
            },
        )
        .unwrap();
        let d = trace_inner_products_with(
            &f,
            &a,
            &b,
            &times,
            TraceOptions {
                solver: Solver::Fixed(SolverKind::DenseSpectral),
                tol: 1e-12,
            },
        )
        .unwrap();
        for i in 0..times.len() {
            let (x, y) = (u.values()[i], d.values()[i]);
            assert!((x - y).abs() <= 1e-9 * y.abs() + 1e-14, "{x} {y}");
        }
        let sym = trace_inner_products(&f, &b, &a, &times).unwrap();
        for i in 0..times.len() {
            assert!((sym.log_values[i] - u.log_values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_trace_values_keep_relative_accuracy() {
        // Far below double range after the split; check stability under
        // tolerance refinement.
        let f = unit(-2.0, 2.0, 128);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, -2.0, -1.5).unwrap();
        let b = RegionSet::interval(&g, 1.5, 2.0).unwrap();
        let times = [0.002, 0.004];
        let opts = |tol| TraceOptions {
            solver: Solver::Fixed(SolverKind::Uniformization),
            tol,
        };
        let coarse = trace_inner_products_with(&f, &a, &b, &times, opts(1e-6)).unwrap();
        let fine = trace_inner_products_with(&f, &a, &b, &times, opts(1e-13)).unwrap();
        for i in 0..2 {
            assert!(fine.log_values[i] < -200.0);
            assert!((coarse.log_values[i] - fine.log_values[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn trace_input_errors() {
        let f = unit(0.0, 1.0, 8);
        let g = f.grid().clone();
        let a = RegionSet::interval(&g, 0.0, 0.2).unwrap();
        let e = RegionSet::interval(&g, 5.0, 6.0).unwrap();
        assert!(trace_inner_products(&f, &a, &e, &[0.1]).is_err());
        assert!(trace_inner_products(&f, &a, &a, &[0.2, 0.1]).is_err());
        assert!(trace_inner_products(&f, &a, &a, &[]).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10, 0.0, 2.0);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(19)).sum();
        assert!((s - 2f64.powi(20) / 20.0).abs() < 1e-9 * s);
        let (x1, w1) = gauss_legendre(1, -1.0, 1.0);
        assert!(x1[0].abs() < 1e-15 && (w1[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn subordination_on_dense_system() {
        let f = unit(0.0, 1.0, 63);
        let phi: Vec<f64> = (0..64)
            .map(|i| if (20..30).contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let d512 = check_subordination(&f, 0.01, &phi, 512).unwrap();
        assert!(d512 <= 1e-6, "{d512}");
        assert!(check_subordination(&f, 0.01, &phi, 4).is_err());
    }
    #[test]
    fn leakage_decays_away_from_the_cone() {
        let g = Grid::new_1d(-4.0, 4.0, 512).unwrap();
        let f = assemble(
            &CoefficientField::constant_scalar(1, 1.0).unwrap(),
            &g,
            None,
        )
        .unwrap();
        let a = RegionSet::interval(&g, -0.1, 0.1).unwrap();
        let t = 1.0;
        let dx = g.dx(0);
        let mut last = f64::INFINITY;
        for k in [3.0, 6.0, 12.0, 24.0, 48.0] {
            let l = leakage_beyond(&f, &a, t, t + k * dx, 1e-14).unwrap();
            assert!(l <= last);
            last = l;
        }
        assert!(last < 1e-6);
        let near = propagation_leakage(&f, &a, t, 1e-14).unwrap();
        assert!(near > 0.0 && near < 0.1);
        assert_eq!(leakage_beyond(&f, &a, t, 100.0, 1e-14).unwrap(), 0.0);
    }
}
