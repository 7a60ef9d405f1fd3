//! Small-time asymptotics of semigroup traces and the checks built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::Potential;
use crate::distance::set_distance;
use crate::error::{LabError, Result};
use crate::evolution::{
    apply_cosine, norm_mu, trace_inner_products_with, Operator, SemigroupTrace, Solver, SolverKind,
    TraceOptions,
};
use crate::form::{laplacian, regularize, truncate, CutoffFunction, DiscreteForm};
use crate::mesh::Grid;
use crate::region::RegionSet;

/// Seed for every randomized check unless overridden.
pub const DEFAULT_SEED: u64 = 0x5EED;

/// Largest lattice hop parameter `d h / (2 t)` admitted in a fit window.
pub const MAX_HOP_PARAMETER: f64 = 0.25;

/// `t_max = d^2 / WINDOW_TOP_DIVISOR`.
pub const WINDOW_TOP_DIVISOR: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FitVerdict {
    Resolved,
    /// Some values underflowed; `lower_bound` is a certified bound on `d^2`.
    ExceedsResolvableBound {
        lower_bound: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct VaradhanFit {
    /// Intercept clamped at 0.
    pub fitted_d_squared: f64,
    pub intercept: f64,
    pub slope: f64,
    pub intercept_std_error: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_points: usize,
    /// `2 SE + 1.5 |change when the largest time is dropped|`.
    pub confidence: f64,
    pub verdict: FitVerdict,
}

struct Ols {
    a: f64,
    b: f64,
    se_a: f64,
    r2: f64,
}

fn ols(x: &[f64], y: &[f64]) -> Ols {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let rss: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let s2 = if n > 2.0 { rss / (n - 2.0) } else { 0.0 };
    let se_a = (s2 * (1.0 / n + mx * mx / sxx.max(1e-300))).sqrt();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ols { a, b, se_a, r2 }
}

/// Regress `y = -4 t ln(value)` on `t` over every resolved trace point and read
/// off the intercept.
pub fn fit_varadhan(trace: &SemigroupTrace) -> Result<VaradhanFit> {
    fit_varadhan_window(trace, 0.0, f64::INFINITY)
}

pub fn fit_varadhan_window(trace: &SemigroupTrace, t_lo: f64, t_hi: f64) -> Result<VaradhanFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut lower_bound: Option<f64> = None;
    for (i, &t) in trace.times.iter().enumerate() {
        if t < t_lo || t > t_hi {
            continue;
        }
        if trace.resolved(i) {
            xs.push(t);
            ys.push(-4.0 * t * trace.log_values[i]);
        } else {
            // Unresolved: value is below its error bound, hence d^2 >= -4 t ln(bound).
            let b = -4.0 * t * trace.log_error_bounds[i].max(trace.log_values[i]);
            if b.is_finite() {
                lower_bound = Some(lower_bound.map_or(b, |l: f64| l.max(b)));
            } else {
                lower_bound = Some(f64::INFINITY);
            }
        }
    }
    if xs.len() < 5 {
        if let Some(lb) = lower_bound {
            return Ok(VaradhanFit {
                fitted_d_squared: lb,
                intercept: f64::NAN,
                slope: f64::NAN,
                intercept_std_error: f64::NAN,
                r_squared: f64::NAN,
                window: (t_lo, t_hi),
                n_points: xs.len(),
                confidence: f64::INFINITY,
                verdict: FitVerdict::ExceedsResolvableBound { lower_bound: lb },
            });
        }
        return Err(LabError::TooFewPoints {
            needed: 5,
            got: xs.len(),
        });
    }
    let full = ols(&xs, &ys);
    let drop = ols(&xs[..xs.len() - 1], &ys[..ys.len() - 1]);
    let confidence = 2.0 * full.se_a + 1.5 * (full.a - drop.a).abs();
    let verdict = match lower_bound {
        Some(lb) if lb > full.a + confidence => {
            FitVerdict::ExceedsResolvableBound { lower_bound: lb }
        }
        _ => FitVerdict::Resolved,
    };
    Ok(VaradhanFit {
        fitted_d_squared: full.a.max(0.0),
        intercept: full.a,
        slope: full.b,
        intercept_std_error: full.se_a,
        r_squared: full.r2,
        window: (xs[0], xs[xs.len() - 1]),
        n_points: xs.len(),
        confidence,
        verdict,
    })
}

/// Fit window policy: `t_min` keeps the lattice hop parameter `d h / (2t)` at
/// most `max_hop` (with `h = d / hops`), `t_max = d^2 / top_divisor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowRule {
    pub max_hop: f64,
    pub top_divisor: f64,
}

impl Default for WindowRule {
    fn default() -> Self {
        WindowRule {
            max_hop: MAX_HOP_PARAMETER,
            top_divisor: WINDOW_TOP_DIVISOR,
        }
    }
}

impl WindowRule {
    pub fn window(&self, d: f64, hops: usize) -> Result<(f64, f64)> {
        if !(d > 0.0) || !d.is_finite() || hops == 0 {
            return Err(LabError::Invalid(format!(
                "fit window needs a finite positive distance (got {d}, {hops} hops)"
            )));
        }
        let h = d / hops as f64;
        let t_min = d * h / (2.0 * self.max_hop);
        let t_max = d * d / self.top_divisor;
        if t_min >= t_max {
            return Err(LabError::Invalid(format!(
                "grid too coarse for a fit window: t_min {t_min:e} >= t_max {t_max:e}"
            )));
        }
        Ok((t_min, t_max))
    }
}

/// Default fit window for a distance `d` realized by a path of `hops` edges.
pub fn varadhan_window(d: f64, hops: usize) -> Result<(f64, f64)> {
    WindowRule::default().window(d, hops)
}

pub fn log_spaced(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![t0];
    }
    let (l0, l1) = (t0.ln(), t1.ln());
    (0..count)
        .map(|i| (l0 + (l1 - l0) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Times, trace and fit for `A`, `B` on `form`, with the window chosen from the
/// shortest-path distance.
#[derive(Debug, Clone)]
pub struct VaradhanRun {
    pub distance: f64,
    pub hops: usize,
    pub trace: SemigroupTrace,
    pub fit: VaradhanFit,
}

pub fn varadhan_run(
    form: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    count: usize,
    opts: TraceOptions,
) -> Result<VaradhanRun> {
    varadhan_run_with(form, a, b, count, opts, WindowRule::default())
}

/// As [`varadhan_run`] with an explicit window policy. The window is derived
/// from the shortest path on `form` itself.
pub fn varadhan_run_with(
    form: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    count: usize,
    opts: TraceOptions,
    rule: WindowRule,
) -> Result<VaradhanRun> {
    let sd = set_distance(form, a, b)?;
    let hops = sd.hops().unwrap_or(0);
    let (t0, t1) = rule.window(sd.value, hops)?;
    let times = log_spaced(t0, t1, count);
    let trace = trace_inner_products_with(form, a, b, &times, opts)?;
    let fit = fit_varadhan(&trace)?;
    Ok(VaradhanRun {
        distance: sd.value,
        hops,
        trace,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Epsilon,
    Dx,
    CutoffRadius,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Dx => "dx",
            SweepAxis::CutoffRadius => "cutoff-radius",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVerdict {
    Converged,
    Diverging,
    Inconclusive,
}

impl SweepVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepVerdict::Converged => "converged",
            SweepVerdict::Diverging => "diverging",
            SweepVerdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub parameter: f64,
    pub fitted_d_squared: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub verdict: SweepVerdict,
    /// Log-log slope of the last two points against the parameter.
    pub rate: f64,
}

/// Growth factor per step for a diverging verdict.
pub const DIVERGENCE_STEP: f64 = 1.2;
/// Relative change of the last step for a converged verdict.
pub const CONVERGENCE_STEP: f64 = 0.03;

/// Classify a sequence ordered in the direction of the limit.
pub fn classify(values: &[f64]) -> SweepVerdict {
    let n = values.len();
    if n >= 3 {
        let tail = &values[n - 3..];
        if tail[1] >= DIVERGENCE_STEP * tail[0]
            && tail[2] >= DIVERGENCE_STEP * tail[1]
            && tail[0] > 0.0
        {
            return SweepVerdict::Diverging;
        }
    }
    if n >= 2 {
        let (p, q) = (values[n - 2], values[n - 1]);
        if (q - p).abs() <= CONVERGENCE_STEP * p.abs().max(q.abs()) {
            return SweepVerdict::Converged;
        }
    }
    SweepVerdict::Inconclusive
}

fn sweep_result(axis: SweepAxis, points: Vec<SweepPoint>) -> SweepResult {
    let vals: Vec<f64> = points.iter().map(|p| p.fitted_d_squared).collect();
    let verdict = classify(&vals);
    let n = points.len();
    let rate = if n >= 2 {
        let (p, q) = (&points[n - 2], &points[n - 1]);
        (q.fitted_d_squared / p.fitted_d_squared).ln() / (q.parameter / p.parameter).ln()
    } else {
        f64::NAN
    };
    SweepResult {
        axis,
        points,
        verdict,
        rate,
    }
}

/// Regularize by each `epsilon` (descending), trace on `times`, fit.
pub fn epsilon_sweep(
    base: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    epsilons: &[f64],
    times: &[f64],
) -> Result<SweepResult> {
    for w in epsilons.windows(2) {
        if !(w[0] > w[1]) {
            return Err(LabError::Invalid(
                "epsilons must be strictly descending".into(),
            ));
        }
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(LabError::Invalid("epsilons must be positive".into()));
    }
    let points = epsilons
        .par_iter()
        .map(|&eps| {
            let form = regularize(base, eps)?;
            let trace = trace_inner_products_with(&form, a, b, times, TraceOptions::default())?;
            let fit = fit_varadhan(&trace)?;
            Ok(SweepPoint {
                parameter: eps,
                fitted_d_squared: fit.fitted_d_squared,
                confidence: fit.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sweep_result(SweepAxis::Epsilon, points))
}

/// Refine `base` by factors of 2 (`levels` grids), rebuild the form and the
/// boxes on each, and fit with the automatic window.
pub fn refinement_sweep<F>(
    base: &Grid,
    levels: usize,
    make_form: F,
    a_box: &[(f64, f64)],
    b_box: &[(f64, f64)],
    count: usize,
) -> Result<(SweepResult, Vec<VaradhanRun>)>
where
    F: Fn(&Grid) -> Result<DiscreteForm> + Sync,
{
    let runs = (0..levels)
        .map(|k| {
            let g = base.refined(1 << k)?;
            let form = make_form(&g)?;
            let a = RegionSet::from_box(&g, a_box)?;
            let b = RegionSet::from_box(&g, b_box)?;
            let run = varadhan_run(&form, &a, &b, count, TraceOptions::default())?;
            Ok((g.min_spacing(), run))
        })
        .collect::<Result<Vec<_>>>()?;
    let points = runs
        .iter()
        .map(|(dx, r)| SweepPoint {
            parameter: *dx,
            fitted_d_squared: r.fit.fitted_d_squared,
            confidence: r.fit.confidence,
        })
        .collect();
    Ok((
        sweep_result(SweepAxis::Dx, points),
        runs.into_iter().map(|(_, r)| r).collect(),
    ))
}

/// `lambda^{-1/2} d(A; complement of the plateau)` with `d` measured in the
/// unit-coefficient metric: the largest time for which the full and truncated
/// cosine families must agree on data in `A`.
pub fn localization_bound(
    base: &DiscreteForm,
    a: &RegionSet,
    cutoff: &CutoffFunction,
) -> Result<f64> {
    let grid = base.grid();
    let outside = cutoff.plateau().complement(grid);
    if a.indices().iter().any(|&i| !cutoff.plateau().contains(i)) {
        return Err(LabError::Invalid(
            "cutoff plateau does not contain A".into(),
        ));
    }
    if outside.is_empty() {
        return Ok(f64::INFINITY);
    }
    let d = set_distance(&laplacian(grid), a, &outside)?.value;
    Ok(d / base.lambda_bound().sqrt())
}

/// Largest relative `L2(mu)` discrepancy between `cos(t H^{1/2}) phi` for the
/// full and truncated forms, over the given times and `seeds` random `phi`
/// supported in `A`.
pub fn localization_discrepancy(
    base: &DiscreteForm,
    a: &RegionSet,
    cutoff: &CutoffFunction,
    times: &[f64],
    seeds: usize,
    seed: u64,
) -> Result<f64> {
    if a.is_empty() {
        return Err(LabError::EmptyRegion("A"));
    }
    let truncated = truncate(base, cutoff)?;
    let mu = base.grid().node_measures();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phis: Vec<Vec<f64>> = (0..seeds)
        .map(|_| {
            let mut v = vec![0.0; base.n_nodes()];
            for &i in a.indices() {
                v[i] = 2.0 * rng.random::<f64>() - 1.0;
            }
            v
        })
        .collect();
    let jobs: Vec<(usize, f64)> = (0..seeds)
        .flat_map(|s| times.iter().map(move |&t| (s, t)))
        .collect();
    let worst = jobs
        .par_iter()
        .map(|&(s, t)| {
            let phi = &phis[s];
            let full = apply_cosine(base, t, phi, 1e-14)?;
            let cut = apply_cosine(&truncated, t, phi, 1e-14)?;
            let diff: Vec<f64> = full.iter().zip(&cut).map(|(x, y)| x - y).collect();
            Ok(norm_mu(&mu, &diff) / norm_mu(&mu, phi).max(1e-300))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

/// Localization check on 16 evenly spaced times in `[0, t_max]` and 5 random
/// data vectors (seed [`DEFAULT_SEED`]).
pub fn localization_check(
    base: &DiscreteForm,
    a: &RegionSet,
    cutoff: &CutoffFunction,
    t_max: f64,
) -> Result<f64> {
    let bound = localization_bound(base, a, cutoff)?;
    if !(bound > 0.0) {
        return Err(LabError::Invalid(
            "cutoff plateau leaves no margin around A".into(),
        ));
    }
    let times: Vec<f64> = (0..16).map(|i| t_max * i as f64 / 15.0).collect();
    localization_discrepancy(base, a, cutoff, &times, 5, DEFAULT_SEED)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrotterReport {
    /// Largest violation of either inequality, in natural-log units.
    pub max_log_violation: f64,
    pub sandwich_holds: bool,
    pub fit_base: Option<VaradhanFit>,
    pub fit_perturbed: Option<VaradhanFit>,
    /// `|d2(h+v) - d2(h)| / d2(h)` when both fits resolved.
    pub relative_fit_change: f64,
    pub fits_agree: bool,
}

/// Check `exp(-t sup V) S_t^h <= S_t^{h+v} <= S_t^h` on the inner-product traces
/// and compare the small-time fits of `h` and `h + v`.
pub fn trotter_sandwich_check(
    base: &DiscreteForm,
    potential: &Potential,
    a: &RegionSet,
    b: &RegionSet,
    times: &[f64],
) -> Result<TrotterReport> {
    let perturbed = base.with_potential(Some(potential));
    let grid = base.grid();
    let vmax = (0..grid.n_nodes())
        .map(|n| potential.eval(&grid.position(n)[..grid.dim()]))
        .fold(f64::NEG_INFINITY, f64::max);
    if !vmax.is_finite() {
        return Err(LabError::Invalid(
            "potential is unbounded on the grid".into(),
        ));
    }
    let unperturbed = base.with_potential(None);
    let opts = TraceOptions {
        solver: Solver::Fixed(SolverKind::Uniformization),
        tol: 1e-11,
    };
    let (th, thv) = rayon::join(
        || trace_inner_products_with(&unperturbed, a, b, times, opts),
        || trace_inner_products_with(&perturbed, a, b, times, opts),
    );
    let (th, thv) = (th?, thv?);
    let slack = 1e-8;
    let mut worst = 0.0f64;
    for i in 0..times.len() {
        let (lh, lv) = (th.log_values[i], thv.log_values[i]);
        if !lh.is_finite() || !lv.is_finite() {
            continue;
        }
        worst = worst.max(lv - lh);
        worst = worst.max(lh - times[i] * vmax.max(0.0) - lv);
    }
    let fh = fit_varadhan(&th).ok();
    let fv = fit_varadhan(&thv).ok();
    let rel = match (&fh, &fv) {
        (Some(x), Some(y)) => {
            (y.fitted_d_squared - x.fitted_d_squared).abs() / x.fitted_d_squared.max(1e-300)
        }
        _ => f64::NAN,
    };
    let agree = match (&fh, &fv) {
        (Some(x), Some(y)) => {
            (y.fitted_d_squared - x.fitted_d_squared).abs() <= x.confidence + y.confidence
        }
        _ => false,
    };
    Ok(TrotterReport {
        max_log_violation: worst,
        sandwich_holds: worst <= slack,
        fit_base: fh,
        fit_perturbed: fv,
        relative_fit_change: rel,
        fits_agree: agree,
    })
}

/// `exp(-tH) x` for nonnegative `x` with relative accuracy `rtol`, returned as a
/// unit vector and the natural log of its norm.
fn relative_apply(op: &Operator, t: f64, x: &[f64], rtol: f64) -> Result<(Vec<f64>, f64)> {
    let rate = op.max_rate();
    let mu = op.measures();
    if rate == 0.0 {
        let n = norm_mu(mu, x);
        return Ok((x.iter().map(|v| v / n).collect(), n.ln()));
    }
    let m = rate * t;
    let mut pk = x.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let total: f64 = mu.iter().sum();
    let xsup = x.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let ln_m = m.ln();
    let mut lp = -m;
    let mut k = 0usize;
    let cap = ((m + 60.0 * m.sqrt() + 2000.0) * 4.0) as usize;
    loop {
        let w = lp.exp();
        if w > 0.0 {
            for (o, p) in out.iter_mut().zip(&pk) {
                *o += w * p;
            }
        }
        if k as f64 > m + 1.0 && k.is_multiple_of(8) {
            let kf = k as f64;
            let tail = lp + ln_m - (kf + 1.0).ln() - (1.0 - m / (kf + 2.0)).ln();
            let est = norm_mu(mu, &out);
            if est > 0.0 && tail + (xsup * total.sqrt()).ln() <= rtol.ln() + est.ln() {
                return Ok((out.iter().map(|v| v / est).collect(), est.ln()));
            }
        }
        if k > cap {
            return Err(LabError::Solver {
                iterations: k,
                residual: f64::NAN,
            });
        }
        op_jump(op, rate, &pk, &mut next);
        std::mem::swap(&mut pk, &mut next);
        k += 1;
        lp += ln_m - (k as f64).ln();
    }
}

fn op_jump(op: &Operator, rate: f64, x: &[f64], y: &mut [f64]) {
    // (I - H / rate) x, using the public action of H.
    op.apply(x, y);
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = (xi - *yi / rate).max(0.0);
    }
}

/// `ln || P_A exp(-tH) P_B ||` in `L2(mu)`, by power iteration on
/// `P_B S_t P_A S_t P_B` from a nonnegative start.
pub fn projection_log_norm(op: &Operator, a: &RegionSet, b: &RegionSet, t: f64) -> Result<f64> {
    let n = op.n();
    let mu = op.measures();
    let mut x = b.indicator(n);
    let nx = norm_mu(mu, &x);
    for v in x.iter_mut() {
        *v /= nx;
    }
    let mut prev = f64::NAN;
    let max_iter = 500;
    for it in 0..max_iter {
        let (u, l1) = relative_apply(op, t, &x, 1e-12)?;
        let u = a.project(&u);
        let nu = norm_mu(mu, &u);
        if nu == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let u: Vec<f64> = u.iter().map(|v| v / nu).collect();
        let (w, l2) = relative_apply(op, t, &u, 1e-12)?;
        let w = b.project(&w);
        let nw = norm_mu(mu, &w);
        if nw == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        // ||T^* T x|| for unit x; converges to sigma^2.
        let est = 0.5 * (l1 + nu.ln() + l2 + nw.ln());
        x = w.iter().map(|v| v / nw).collect();
        if (est - prev).abs() <= 1e-10 * est.abs().max(1.0) {
            return Ok(est);
        }
        if it + 1 == max_iter {
            return Err(LabError::Stagnation {
                iterations: max_iter,
                change: (est - prev).abs(),
            });
        }
        prev = est;
    }
    unreachable!()
}

/// Trace of projection norms `|| P_A S_t P_B ||` (log scale).
pub fn projection_norm_trace(
    form: &DiscreteForm,
    a: &RegionSet,
    b: &RegionSet,
    times: &[f64],
) -> Result<SemigroupTrace> {
    if a.is_empty() {
        return Err(LabError::EmptyRegion("A"));
    }
    if b.is_empty() {
        return Err(LabError::EmptyRegion("B"));
    }
    let op = Operator::new(form);
    let log_values = times
        .par_iter()
        .map(|&t| projection_log_norm(&op, a, b, t))
        .collect::<Result<Vec<f64>>>()?;
    let log_error_bounds = log_values.iter().map(|v| v + 1e-6f64.ln()).collect();
    Ok(SemigroupTrace {
        times: times.to_vec(),
        log_values,
        log_error_bounds,
        solver: SolverKind::Uniformization,
    })
}

/// Largest excess of `(1_A, S_t 1_B)` over `exp(-d^2/4t) |A|^{1/2} |B|^{1/2}`,
/// relative to the bound, across a trace, with `d` the set distance. Values
/// within `abs_slack` of the bound count as satisfied.
pub fn davies_gaffney_excess(
    trace: &SemigroupTrace,
    d: f64,
    a: &RegionSet,
    b: &RegionSet,
    abs_slack: f64,
) -> f64 {
    let ln_ab = 0.5 * (a.measure() * b.measure()).ln();
    let mut worst = f64::NEG_INFINITY;
    for (i, &t) in trace.times.iter().enumerate() {
        let ln_bound = -d * d / (4.0 * t) + ln_ab;
        let bound = ln_bound.exp();
        let value = trace.log_values[i].exp();
        worst = worst.max(value - bound - abs_slack);
    }
    worst
}
