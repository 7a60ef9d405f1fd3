//! Scenario files and the batch runner behind the `lab` binary.
//!
//! A scenario is a TOML document. Time is dimensionless model time throughout;
//! lengths are in the units of the grid bounds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    davies_gaffney_excess, epsilon_sweep, fit_varadhan, fit_varadhan_window, localization_bound,
    localization_check, log_spaced, trotter_sandwich_check, FitVerdict, SweepResult, WindowRule,
};
use crate::coefficients::{CoefficientField, Potential, Sym2};
use crate::distance::{effective_resistance, eikonal_distance, exhaustion_distance, set_distance};
use crate::error::LabError;
use crate::evolution::{
    check_subordination, propagation_leakage, trace_inner_products, SemigroupTrace,
};
use crate::form::{assemble, CutoffFunction, DiscreteForm};
use crate::mesh::Grid;
use crate::region::RegionSet;

/// One `(lo, hi)` pair per axis.
type Boxes = Vec<(f64, f64)>;

/// Version written as `#schema=N` on the first line of every CSV file.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Varadhan,
    DaviesGaffney,
    Propagation,
    Subordination,
    Localization,
    Trotter,
    Resistance,
    Exhaustion,
}

/// One entry of `lab checks`.
#[derive(Debug, Clone, Serialize)]
pub struct CheckInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub claim: &'static str,
}

impl CheckName {
    pub const ALL: [CheckName; 8] = [
        CheckName::Varadhan,
        CheckName::DaviesGaffney,
        CheckName::Propagation,
        CheckName::Subordination,
        CheckName::Localization,
        CheckName::Trotter,
        CheckName::Resistance,
        CheckName::Exhaustion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckName::Varadhan => "varadhan",
            CheckName::DaviesGaffney => "davies_gaffney",
            CheckName::Propagation => "propagation",
            CheckName::Subordination => "subordination",
            CheckName::Localization => "localization",
            CheckName::Trotter => "trotter",
            CheckName::Resistance => "resistance",
            CheckName::Exhaustion => "exhaustion",
        }
    }

    pub fn info(&self) -> CheckInfo {
        let (description, claim) = match self {
            CheckName::Varadhan => (
                "fit -4t log (1_A, S_t 1_B) over the time window and compare with the eikonal distance",
                "lim_{t->0} -4t log (1_A, S_t 1_B) = d(A;B)^2",
            ),
            CheckName::DaviesGaffney => (
                "compare the trace with the Gaussian off-diagonal bound at every time",
                "(1_A, S_t 1_B) <= exp(-d(A;B)^2/4t) |A|^{1/2} |B|^{1/2}",
            ),
            CheckName::Propagation => (
                "mass of cos(t H^{1/2}) 1_A outside the light cone",
                "cos(t H^{1/2}) has propagation speed at most lambda^{1/2}",
            ),
            CheckName::Subordination => (
                "quadrature of the cosine family against the heat semigroup",
                "S_t = (pi t)^{-1/2} int_0^inf exp(-s^2/4t) cos(s H^{1/2}) ds",
            ),
            CheckName::Localization => (
                "cosine families of the full and cutoff-truncated forms on data in A",
                "cos(t H^{1/2}) depends only on the form near A for small t",
            ),
            CheckName::Trotter => (
                "entrywise ordering of the traces with and without the potential, and fit agreement",
                "exp(-t sup V) S_t <= S_t^V <= S_t; bounded V does not change d",
            ),
            CheckName::Resistance => (
                "effective resistance between A and B against the variational bound from the distance function",
                "|psi(a) - psi(b)|^2 <= R(a,b) E(psi)",
            ),
            CheckName::Exhaustion => (
                "distances from A restricted to a growing family of boxes",
                "d(A cap X_n; B) decreases to d(A;B) along an exhaustion",
            ),
        };
        CheckInfo {
            name: self.as_str(),
            description,
            claim,
        }
    }
}

/// Every check in the fixed listing order.
pub fn list_checks() -> Vec<CheckInfo> {
    CheckName::ALL.iter().map(|c| c.info()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Reflecting,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_cells: Vec<usize>,
    #[serde(default)]
    pub boundary: Boundary,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// Scalar `value`, or the symmetric matrix `tensor = [xx, xy, yy]` in 2D.
    Constant {
        value: Option<f64>,
        tensor: Option<[f64; 3]>,
    },
    CDelta {
        delta: f64,
    },
    CDelta2dInterval {
        delta: f64,
        halfwidth: f64,
    },
    Tabulated {
        xs: Vec<f64>,
        cs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Zero,
    Constant { value: f64 },
    Quadratic { scale: f64 },
    Tabulated { xs: Vec<f64>, vs: Vec<f64> },
}

/// Boxes as one `[lo, hi]` pair per axis.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
}

/// Which trace points enter the Varadhan fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWindow {
    /// Points inside both `[t_min, t_max]` and the lattice window of
    /// [`WindowRule`], whose parameters may be overridden.
    #[default]
    Auto,
    /// Every point.
    Full,
}

/// `count` log-spaced times in `[t_min, t_max]`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub count: usize,
    #[serde(default)]
    pub fit_window: FitWindow,
    pub max_hop: Option<f64>,
    pub top_divisor: Option<f64>,
}

impl TimeSpec {
    pub fn window_rule(&self) -> WindowRule {
        let d = WindowRule::default();
        WindowRule {
            max_hop: self.max_hop.unwrap_or(d.max_hop),
            top_divisor: self.top_divisor.unwrap_or(d.top_divisor),
        }
    }
}

/// Wave-time and cutoff parameters for the cosine-family checks. Unset values
/// are derived from the box width.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSpec {
    pub t: Option<f64>,
    pub plateau_radius: Option<f64>,
    pub ramp_width: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub varadhan_relative: f64,
    pub davies_gaffney_slack: f64,
    pub propagation: f64,
    pub subordination: f64,
    pub subordination_points: usize,
    pub localization: f64,
    pub trotter_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            varadhan_relative: 0.05,
            davies_gaffney_slack: 1e-8,
            propagation: 1e-8,
            subordination: 1e-6,
            subordination_points: 512,
            localization: 1e-8,
            trotter_relative: 0.03,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub checks: Vec<CheckName>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    /// Output directory, relative to the scenario file.
    pub out: Option<PathBuf>,
    pub grid: GridSpec,
    pub coefficient: CoefficientSpec,
    pub potential: Option<PotentialSpec>,
    pub regions: RegionSpec,
    pub times: TimeSpec,
    #[serde(default)]
    pub wave: WaveSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("solver failure in check {check}: {source}")]
    Solver { check: String, source: LabError },
}

/// Process exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Pass = 0,
    CheckFailed = 1,
    Invalid = 2,
    SolverFailure = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

impl ScenarioError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            ScenarioError::Solver { .. } => ExitStatus::SolverFailure,
            _ => ExitStatus::Invalid,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(msg.into())
}

impl Scenario {
    /// Parse and validate.
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let g = &self.grid;
        if g.dim != 1 && g.dim != 2 {
            return Err(invalid(format!("grid.dim = {} (expected 1 or 2)", g.dim)));
        }
        for (key, len) in [
            ("grid.lower", g.lower.len()),
            ("grid.upper", g.upper.len()),
            ("grid.n_cells", g.n_cells.len()),
        ] {
            if len != g.dim {
                return Err(invalid(format!(
                    "{key} has {len} entries for dim {}",
                    g.dim
                )));
            }
        }
        for ax in 0..g.dim {
            if !(g.lower[ax] < g.upper[ax]) || !g.lower[ax].is_finite() || !g.upper[ax].is_finite()
            {
                return Err(invalid(format!(
                    "grid bounds on axis {ax} are not an interval"
                )));
            }
            if g.n_cells[ax] < 2 {
                return Err(invalid(format!(
                    "grid.n_cells[{ax}] = {} (need >= 2)",
                    g.n_cells[ax]
                )));
            }
        }
        for (key, boxes) in [
            ("regions.a", &self.regions.a),
            ("regions.b", &self.regions.b),
        ] {
            if boxes.len() != g.dim {
                return Err(invalid(format!(
                    "{key} has {} axis ranges for dim {}",
                    boxes.len(),
                    g.dim
                )));
            }
            for (ax, [lo, hi]) in boxes.iter().enumerate() {
                let width = g.upper[ax] - g.lower[ax];
                let margin = 0.1 * width;
                if !(lo <= hi) {
                    return Err(invalid(format!("{key} axis {ax}: [{lo}, {hi}] is empty")));
                }
                if *lo < g.lower[ax] + margin || *hi > g.upper[ax] - margin {
                    return Err(invalid(format!(
                        "{key} axis {ax}: [{lo}, {hi}] must stay {margin} (10% of the box width) inside [{}, {}]",
                        g.lower[ax], g.upper[ax]
                    )));
                }
            }
        }
        let t = &self.times;
        if !(t.t_min > 0.0) || !t.t_max.is_finite() || !(t.t_min < t.t_max) {
            return Err(invalid(format!(
                "times: need 0 < t_min < t_max, got {} and {}",
                t.t_min, t.t_max
            )));
        }
        if t.max_hop.is_some_and(|h| !(h > 0.0) || !h.is_finite())
            || t.top_divisor.is_some_and(|h| !(h > 0.0) || !h.is_finite())
        {
            return Err(invalid(
                "times.max_hop and times.top_divisor must be positive",
            ));
        }
        if t.count < 2 {
            return Err(invalid(format!("times.count = {} (need >= 2)", t.count)));
        }
        if self.checks.contains(&CheckName::Varadhan) && t.count < 5 {
            return Err(invalid(format!(
                "times.count = {} (varadhan needs >= 5)",
                t.count
            )));
        }
        for (i, c) in self.checks.iter().enumerate() {
            if self.checks[..i].contains(c) {
                return Err(invalid(format!("check {} listed twice", c.as_str())));
            }
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(invalid("epsilons must be positive and finite"));
        }
        if self.epsilons.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(invalid("epsilons must be strictly descending"));
        }
        match &self.coefficient {
            CoefficientSpec::Constant { value, tensor } => match (value, tensor) {
                (Some(_), None) => {}
                (None, Some(_)) if g.dim == 2 => {}
                (None, Some(_)) => return Err(invalid("coefficient.tensor needs dim = 2")),
                _ => {
                    return Err(invalid(
                        "constant coefficient needs exactly one of value, tensor",
                    ))
                }
            },
            CoefficientSpec::CDelta { .. } | CoefficientSpec::Tabulated { .. } if g.dim != 1 => {
                return Err(invalid("coefficient kind needs dim = 1"))
            }
            CoefficientSpec::CDelta2dInterval { .. } if g.dim != 2 => {
                return Err(invalid("c_delta_2d_interval needs dim = 2"))
            }
            _ => {}
        }
        if let Some(PotentialSpec::Tabulated { .. }) = &self.potential {
            if g.dim != 1 {
                return Err(invalid("tabulated potential needs dim = 1"));
            }
        }
        if self.checks.contains(&CheckName::Trotter) && self.potential.is_none() {
            return Err(invalid("trotter check needs a [potential] section"));
        }
        if let Some(w) = self.wave.t {
            if !(w > 0.0) || !w.is_finite() {
                return Err(invalid("wave.t must be positive"));
            }
        }
        let tol = &self.tolerances;
        if tol.subordination_points < 8 {
            return Err(invalid("tolerances.subordination_points must be >= 8"));
        }
        // Field parameters are checked by their constructors.
        self.field()
            .map_err(|e| invalid(format!("coefficient: {e}")))?;
        self.potential_value()
            .map_err(|e| invalid(format!("potential: {e}")))?;
        Ok(())
    }

    pub fn build_grid(&self) -> Result<Grid, LabError> {
        let g = &self.grid;
        if g.dim == 1 {
            Grid::new_1d(g.lower[0], g.upper[0], g.n_cells[0])
        } else {
            Grid::new_2d(
                [g.lower[0], g.lower[1]],
                [g.upper[0], g.upper[1]],
                [g.n_cells[0], g.n_cells[1]],
            )
        }
    }

    pub fn field(&self) -> Result<CoefficientField, LabError> {
        match &self.coefficient {
            CoefficientSpec::Constant { value: Some(c), .. } => {
                CoefficientField::constant_scalar(self.grid.dim, *c)
            }
            CoefficientSpec::Constant {
                tensor: Some([xx, xy, yy]),
                ..
            } => CoefficientField::constant(2, Sym2::new(*xx, *xy, *yy)),
            CoefficientSpec::Constant { .. } => Err(LabError::Invalid(
                "constant coefficient without a value".into(),
            )),
            CoefficientSpec::CDelta { delta } => CoefficientField::c_delta(*delta),
            CoefficientSpec::CDelta2dInterval { delta, halfwidth } => {
                CoefficientField::c_delta_2d(*delta, *halfwidth)
            }
            CoefficientSpec::Tabulated { xs, cs } => {
                CoefficientField::tabulated(xs.clone(), cs.clone())
            }
        }
    }

    pub fn potential_value(&self) -> Result<Option<Potential>, LabError> {
        Ok(match &self.potential {
            None => None,
            Some(PotentialSpec::Zero) => Some(Potential::zero()),
            Some(PotentialSpec::Constant { value }) => Some(Potential::constant(*value)?),
            Some(PotentialSpec::Quadratic { scale }) => Some(Potential::quadratic(*scale)?),
            Some(PotentialSpec::Tabulated { xs, vs }) => {
                Some(Potential::tabulated(xs.clone(), vs.clone())?)
            }
        })
    }

    fn boxes(&self) -> (Boxes, Boxes) {
        let conv = |v: &Vec<[f64; 2]>| v.iter().map(|[a, b]| (*a, *b)).collect();
        (conv(&self.regions.a), conv(&self.regions.b))
    }

    fn width(&self) -> f64 {
        (0..self.grid.dim)
            .map(|a| self.grid.upper[a] - self.grid.lower[a])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// `key=value` pairs for the report line.
    pub fields: Vec<(String, String)>,
}

impl CheckOutcome {
    fn line(&self) -> String {
        let mut s = format!(
            "check={} status={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for (k, v) in &self.fields {
            let _ = write!(s, " {k}={v}");
        }
        s
    }
}

#[derive(Default)]
struct Outputs {
    trace: Vec<String>,
    distances: Vec<String>,
    sweep: Vec<String>,
    report: Vec<String>,
}

impl Outputs {
    fn add_trace(&mut self, series: &str, tr: &SemigroupTrace) {
        for i in 0..tr.times.len() {
            let (lv, le) = (tr.log_values[i], tr.log_error_bounds[i]);
            self.trace.push(format!(
                "{},{},{},{},{},{},{}",
                num(tr.times[i]),
                num(lv.exp()),
                num(le.exp()),
                tr.solver.as_str(),
                series,
                num(lv / std::f64::consts::LN_10),
                num(le / std::f64::consts::LN_10),
            ));
        }
    }

    fn add_distance(
        &mut self,
        method: &str,
        value: f64,
        max_gamma: Option<f64>,
        wall: f64,
        label: &str,
    ) {
        let g = max_gamma.map(num).unwrap_or_default();
        self.distances
            .push(format!("{method},{},{g},{},{label}", num(value), num(wall)));
    }

    fn add_sweep(&mut self, r: &SweepResult) {
        for p in &r.points {
            self.sweep.push(format!(
                "{},{},{},{},{}",
                r.axis.as_str(),
                num(p.parameter),
                num(p.fitted_d_squared),
                num(p.confidence),
                r.verdict.as_str()
            ));
        }
    }

    fn write(&self, dir: &Path, header: &[String], footer: &[String]) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let csv = |cols: &str, rows: &[String]| {
            let mut s = format!("#schema={SCHEMA_VERSION}\n{cols}\n");
            for r in rows {
                s.push_str(r);
                s.push('\n');
            }
            s
        };
        fs::write(
            dir.join("trace.csv"),
            csv(
                "t,value,error_bound,solver,series,log10_value,log10_error_bound",
                &self.trace,
            ),
        )?;
        fs::write(
            dir.join("distances.csv"),
            csv(
                "method,value,certificate_max_gamma,wall_time,label",
                &self.distances,
            ),
        )?;
        fs::write(
            dir.join("sweep.csv"),
            csv(
                "axis,parameter,fitted_d_squared,confidence,verdict",
                &self.sweep,
            ),
        )?;
        let mut rep = String::new();
        for l in header.iter().chain(&self.report).chain(footer) {
            rep.push_str(l);
            rep.push('\n');
        }
        fs::write(dir.join("report.txt"), rep)
    }
}

/// Assembled objects shared by the checks.
struct Setup {
    grid: Grid,
    form: DiscreteForm,
    potential: Option<Potential>,
    a: RegionSet,
    b: RegionSet,
    times: Vec<f64>,
}

trait Field {
    fn render(&self) -> String;
}

impl Field for f64 {
    fn render(&self) -> String {
        num(*self)
    }
}

impl Field for usize {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Field for bool {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Field for &str {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Field for String {
    fn render(&self) -> String {
        self.clone()
    }
}

fn kv(k: &str, v: impl Field) -> (String, String) {
    (k.to_string(), v.render())
}

/// Shortest round-trip decimal, in exponent form outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Centre node of a box.
fn centre(grid: &Grid, bx: &[(f64, f64)]) -> usize {
    let c: Vec<f64> = bx.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    grid.nearest_node(&c)
}

struct Runner<'a> {
    sc: &'a Scenario,
    setup: Setup,
    trace: Option<SemigroupTrace>,
    distance: Option<(f64, usize)>,
}

impl Runner<'_> {
    /// The trace on the scenario times, computed and written once.
    fn base_trace(&mut self, out: &mut Outputs) -> Result<SemigroupTrace, LabError> {
        if let Some(t) = &self.trace {
            return Ok(t.clone());
        }
        let s = &self.setup;
        let t = trace_inner_products(&s.form, &s.a, &s.b, &s.times)?;
        out.add_trace("base", &t);
        self.trace = Some(t.clone());
        Ok(t)
    }

    /// Eikonal distance from `A` to `B` and the hop count of its path.
    fn distance(&mut self, out: &mut Outputs) -> Result<(f64, usize), LabError> {
        if let Some(d) = self.distance {
            return Ok(d);
        }
        let t0 = Instant::now();
        let s = &self.setup;
        let r = set_distance(&s.form, &s.a, &s.b)?;
        out.add_distance("eikonal", r.value, None, t0.elapsed().as_secs_f64(), "A-B");
        let d = (r.value, r.hops().unwrap_or(0));
        self.distance = Some(d);
        Ok(d)
    }

    fn wave_time(&self) -> f64 {
        self.sc
            .wave
            .t
            .unwrap_or_else(|| 0.1 * self.sc.width() / self.setup.form.lambda_bound().sqrt())
    }

    fn run(&mut self, check: CheckName, out: &mut Outputs) -> Result<CheckOutcome, LabError> {
        let tol = self.sc.tolerances.clone();
        let name = check.as_str();
        let outcome = match check {
            CheckName::Varadhan => {
                let (d, hops) = self.distance(out)?;
                let trace = self.base_trace(out)?;
                let ts = &self.sc.times;
                let fitted = match ts.fit_window {
                    FitWindow::Full => fit_varadhan(&trace),
                    FitWindow::Auto => ts.window_rule().window(d, hops).and_then(|(lo, hi)| {
                        fit_varadhan_window(&trace, lo.max(ts.t_min), hi.min(ts.t_max))
                    }),
                };
                let fit = match fitted {
                    Ok(f) => f,
                    Err(e @ (LabError::Invalid(_) | LabError::TooFewPoints { .. })) => {
                        return Ok(CheckOutcome {
                            name,
                            passed: false,
                            fields: vec![kv("expected", d * d), kv("reason", format!("\"{e}\""))],
                        })
                    }
                    Err(e) => return Err(e),
                };
                let expected = d * d;
                let mut fields = vec![
                    kv("fit_t_min", fit.window.0),
                    kv("fit_t_max", fit.window.1),
                    kv("fit_points", fit.n_points),
                    kv("fitted_d_squared", fit.fitted_d_squared),
                    kv("expected", expected),
                    kv("confidence", fit.confidence),
                    kv("r_squared", fit.r_squared),
                ];
                let passed = match fit.verdict {
                    FitVerdict::Resolved if expected.is_finite() => {
                        let rel = (fit.fitted_d_squared - expected).abs()
                            / expected.max(f64::MIN_POSITIVE);
                        fields.push(kv("relative_error", rel));
                        fields.push(kv("tolerance", tol.varadhan_relative));
                        rel <= tol.varadhan_relative
                    }
                    FitVerdict::Resolved => false,
                    FitVerdict::ExceedsResolvableBound { lower_bound } => {
                        fields.push(kv("lower_bound", lower_bound));
                        expected >= lower_bound
                    }
                };
                out.add_distance("decay-fit", fit.fitted_d_squared.sqrt(), None, 0.0, "A-B");
                if !self.sc.epsilons.is_empty() {
                    let s = &self.setup;
                    let sweep = epsilon_sweep(&s.form, &s.a, &s.b, &self.sc.epsilons, &s.times)?;
                    out.add_sweep(&sweep);
                    fields.push(kv("epsilon_sweep_verdict", sweep.verdict.as_str()));
                }
                CheckOutcome {
                    name,
                    passed,
                    fields,
                }
            }
            CheckName::DaviesGaffney => {
                let (d, _) = self.distance(out)?;
                let trace = self.base_trace(out)?;
                let s = &self.setup;
                let excess = davies_gaffney_excess(&trace, d, &s.a, &s.b, tol.davies_gaffney_slack);
                CheckOutcome {
                    name,
                    passed: excess <= 0.0,
                    fields: vec![
                        kv("max_excess", excess),
                        kv("expected", "<=0"),
                        kv("slack", tol.davies_gaffney_slack),
                    ],
                }
            }
            CheckName::Propagation => {
                let t = self.wave_time();
                let s = &self.setup;
                let leak = propagation_leakage(&s.form, &s.a, t, 1e-14)?;
                CheckOutcome {
                    name,
                    passed: leak <= tol.propagation,
                    fields: vec![
                        kv("t", t),
                        kv("leakage", leak),
                        kv("tolerance", tol.propagation),
                    ],
                }
            }
            CheckName::Subordination => {
                let s = &self.setup;
                let t = *s.times.last().unwrap_or(&self.sc.times.t_max);
                let phi = s.a.indicator(s.grid.n_nodes());
                let err = check_subordination(&s.form, t, &phi, tol.subordination_points)?;
                CheckOutcome {
                    name,
                    passed: err <= tol.subordination,
                    fields: vec![
                        kv("t", t),
                        kv("relative_error", err),
                        kv("tolerance", tol.subordination),
                        kv("points", tol.subordination_points),
                    ],
                }
            }
            CheckName::Localization => {
                let s = &self.setup;
                let w = self.sc.width();
                let plateau = self.sc.wave.plateau_radius.unwrap_or(0.1 * w);
                let ramp = self.sc.wave.ramp_width.unwrap_or(0.05 * w);
                let cutoff = CutoffFunction::ramp_around(&s.grid, &s.a, plateau, ramp)?;
                let bound = localization_bound(&s.form, &s.a, &cutoff)?;
                let t_max = 0.95 * bound;
                let disc = localization_check(&s.form, &s.a, &cutoff, t_max)?;
                CheckOutcome {
                    name,
                    passed: disc <= tol.localization,
                    fields: vec![
                        kv("t_bound", bound),
                        kv("t_max", t_max),
                        kv("discrepancy", disc),
                        kv("tolerance", tol.localization),
                    ],
                }
            }
            CheckName::Trotter => {
                let s = &self.setup;
                let v = s
                    .potential
                    .as_ref()
                    .ok_or_else(|| LabError::Invalid("trotter check without a potential".into()))?;
                let r = trotter_sandwich_check(&s.form, v, &s.a, &s.b, &s.times)?;
                let agree = r.relative_fit_change <= tol.trotter_relative;
                CheckOutcome {
                    name,
                    passed: r.sandwich_holds && agree,
                    fields: vec![
                        kv("max_log_violation", r.max_log_violation),
                        kv("sandwich_holds", r.sandwich_holds),
                        kv(
                            "fit_base",
                            r.fit_base.map(|f| f.fitted_d_squared).unwrap_or(f64::NAN),
                        ),
                        kv(
                            "fit_perturbed",
                            r.fit_perturbed
                                .map(|f| f.fitted_d_squared)
                                .unwrap_or(f64::NAN),
                        ),
                        kv("relative_fit_change", r.relative_fit_change),
                        kv("tolerance", tol.trotter_relative),
                    ],
                }
            }
            CheckName::Resistance => {
                let (abox, bbox) = self.sc.boxes();
                let s = &self.setup;
                let (pa, pb) = (centre(&s.grid, &abox), centre(&s.grid, &bbox));
                let t0 = Instant::now();
                let r = effective_resistance(&s.form, pa, pb)?;
                out.add_distance(
                    "effective-resistance",
                    r,
                    None,
                    t0.elapsed().as_secs_f64(),
                    "centre(A)-centre(B)",
                );
                let src = RegionSet::from_indices(&s.grid, vec![pb])?;
                let mut psi = eikonal_distance(&s.form, &src)?;
                let cap = psi
                    .iter()
                    .cloned()
                    .filter(|v| v.is_finite())
                    .fold(0.0, f64::max);
                for p in psi.iter_mut() {
                    *p = p.min(cap);
                }
                let lhs = (psi[pa] - psi[pb]).powi(2);
                let rhs = r * s.form.energy(&psi)?;
                CheckOutcome {
                    name,
                    passed: lhs <= rhs * (1.0 + 1e-9),
                    fields: vec![
                        kv("resistance", r),
                        kv("squared_increment", lhs),
                        kv("resistance_times_energy", rhs),
                        kv("expected", "squared_increment<=resistance_times_energy"),
                    ],
                }
            }
            CheckName::Exhaustion => {
                let (d, _) = self.distance(out)?;
                let (abox, _) = self.sc.boxes();
                let s = &self.setup;
                let c = centre(&s.grid, &abox);
                let pos = s.grid.position(c);
                let span = abox
                    .iter()
                    .enumerate()
                    .map(|(ax, (lo, hi))| (pos[ax] - lo).max(hi - pos[ax]))
                    .fold(0.0, f64::max);
                let family: Vec<RegionSet> = (1..=5)
                    .map(|k| {
                        let r = span * k as f64 / 5.0;
                        let bx: Vec<(f64, f64)> = (0..s.grid.dim())
                            .map(|ax| (pos[ax] - r, pos[ax] + r))
                            .collect();
                        RegionSet::from_box(&s.grid, &bx)
                    })
                    .collect::<Result<_, _>>()?;
                let reports = exhaustion_distance(&s.form, &s.a, &s.b, &family)?;
                let vals: Vec<f64> = reports.iter().map(|r| r.value).collect();
                for (k, v) in vals.iter().enumerate() {
                    out.add_distance("eikonal", *v, None, 0.0, &format!("exhaustion-{}", k + 1));
                }
                let monotone = vals.windows(2).all(|w| w[1] <= w[0]);
                let last = *vals.last().unwrap_or(&f64::INFINITY);
                let reaches = (last - d).abs() <= 1e-12 * d.max(1.0);
                CheckOutcome {
                    name,
                    passed: monotone && reaches,
                    fields: vec![
                        kv("first", vals[0]),
                        kv("last", last),
                        kv("expected", d),
                        kv("monotone", monotone),
                    ],
                }
            }
        };
        Ok(outcome)
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outcomes: Vec<CheckOutcome>,
}

impl RunSummary {
    pub fn status(&self) -> ExitStatus {
        if self.outcomes.iter().all(|o| o.passed) {
            ExitStatus::Pass
        } else {
            ExitStatus::CheckFailed
        }
    }
}

/// Run every requested check in declared order, writing the four output files
/// into `out_dir` after each check. A solver failure writes what was produced
/// so far, flags the report as partial, and returns the error.
pub fn execute(sc: &Scenario, out_dir: &Path) -> Result<RunSummary, ScenarioError> {
    let io_err = |e: std::io::Error| ScenarioError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    };
    let header = vec![
        format!("scenario={}", sc.name),
        format!("schema={SCHEMA_VERSION}"),
    ];
    let mut out = Outputs::default();
    let setup_err = |source| ScenarioError::Solver {
        check: "setup".into(),
        source,
    };
    let setup = (|| -> Result<Setup, LabError> {
        let grid = sc.build_grid()?;
        let form = assemble(&sc.field()?, &grid, None)?;
        let (abox, bbox) = sc.boxes();
        let a = RegionSet::from_box(&grid, &abox)?;
        let b = RegionSet::from_box(&grid, &bbox)?;
        if a.is_empty() {
            return Err(LabError::EmptyRegion("A"));
        }
        if b.is_empty() {
            return Err(LabError::EmptyRegion("B"));
        }
        let times = log_spaced(sc.times.t_min, sc.times.t_max, sc.times.count);
        Ok(Setup {
            grid,
            form,
            potential: sc.potential_value()?,
            a,
            b,
            times,
        })
    })()
    .map_err(setup_err)?;
    let mut runner = Runner {
        sc,
        setup,
        trace: None,
        distance: None,
    };
    let mut outcomes = Vec::new();
    for &check in &sc.checks {
        match runner.run(check, &mut out) {
            Ok(o) => {
                out.report.push(o.line());
                outcomes.push(o);
                out.write(out_dir, &header, &[]).map_err(io_err)?;
            }
            Err(source) => {
                out.report.push(format!(
                    "check={} status=ABORTED error=\"{source}\"",
                    check.as_str()
                ));
                out.write(
                    out_dir,
                    &header,
                    &["partial=true".into(), "overall=SOLVER_FAILURE".into()],
                )
                .map_err(io_err)?;
                return Err(ScenarioError::Solver {
                    check: check.as_str().into(),
                    source,
                });
            }
        }
    }
    let summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        outcomes,
    };
    let overall = if summary.status() == ExitStatus::Pass {
        "PASS"
    } else {
        "FAIL"
    };
    out.write(out_dir, &header, &[format!("overall={overall}")])
        .map_err(io_err)?;
    Ok(summary)
}

/// Output directory: the override, else `out` relative to the scenario file,
/// else `out/<name>` next to it.
pub fn resolve_out_dir(sc: &Scenario, path: &Path, over: Option<&Path>) -> PathBuf {
    if let Some(o) = over {
        return o.to_path_buf();
    }
    let base = path.parent().unwrap_or(Path::new("."));
    match &sc.out {
        Some(o) if o.is_absolute() => o.clone(),
        Some(o) => base.join(o),
        None => base.join("out").join(&sc.name),
    }
}

/// Parse, validate and execute a scenario file.
pub fn run_scenario(path: &Path, out: Option<&Path>) -> Result<RunSummary, ScenarioError> {
    let sc = Scenario::from_path(path)?;
    let dir = resolve_out_dir(&sc, path, out);
    execute(&sc, &dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
checks = ["varadhan"]

[grid]
dim = 1
lower = [-8.0]
upper = [8.0]
n_cells = [256]

[coefficient]
kind = "constant"
value = 1.0

[regions]
a = [[-2.0, -1.0]]
b = [[1.0, 2.0]]

[times]
t_min = 0.05
t_max = 0.2
count = 8
"#;

    #[test]
    fn parses_the_base_document() {
        let s = Scenario::from_toml_str(BASE).unwrap();
        assert_eq!(s.checks, vec![CheckName::Varadhan]);
        assert_eq!(s.grid.boundary, Boundary::Reflecting);
        assert_eq!(s.tolerances.subordination_points, 512);
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = BASE.replace("n_cells", "n_cels");
        let e = Scenario::from_toml_str(&bad).unwrap_err();
        assert!(matches!(e, ScenarioError::Parse(_)));
        assert!(e.to_string().contains("n_cels"), "{e}");
        assert_eq!(e.exit_status(), ExitStatus::Invalid);
        let bad = BASE.replace("value = 1.0", "value = 1.0\nslope = 2.0");
        assert!(Scenario::from_toml_str(&bad)
            .unwrap_err()
            .to_string()
            .contains("slope"));
    }

    #[test]
    fn validation_rules() {
        let edge = BASE.replace("[-2.0, -1.0]", "[-7.5, -1.0]");
        assert!(matches!(
            Scenario::from_toml_str(&edge),
            Err(ScenarioError::Validation(_))
        ));
        let times = BASE.replace("t_min = 0.05", "t_min = 0.5");
        assert!(matches!(
            Scenario::from_toml_str(&times),
            Err(ScenarioError::Validation(_))
        ));
        let few = BASE.replace("count = 8", "count = 4");
        assert!(matches!(
            Scenario::from_toml_str(&few),
            Err(ScenarioError::Validation(_))
        ));
        let no_v = few.replace("[\"varadhan\"]", "[\"resistance\"]");
        assert!(Scenario::from_toml_str(&no_v).is_ok());
        let trotter = BASE.replace("[\"varadhan\"]", "[\"trotter\"]");
        assert!(matches!(
            Scenario::from_toml_str(&trotter),
            Err(ScenarioError::Validation(_))
        ));
        let delta = BASE.replace(
            "kind = \"constant\"\nvalue = 1.0",
            "kind = \"c_delta\"\ndelta = 2.0",
        );
        assert!(matches!(
            Scenario::from_toml_str(&delta),
            Err(ScenarioError::Validation(_))
        ));
    }

    #[test]
    fn check_listing_is_stable() {
        let names: Vec<&str> = list_checks().iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            [
                "varadhan",
                "davies_gaffney",
                "propagation",
                "subordination",
                "localization",
                "trotter",
                "resistance",
                "exhaustion"
            ]
        );
    }
}
