use std::path::{Path, PathBuf};

use difflab::asymptotics::{fit_varadhan_window, varadhan_run, FitVerdict, WindowRule};
use difflab::coefficients::CoefficientField;
use difflab::distance::{effective_resistance, set_distance};
use difflab::evolution::{apply_semigroup, trace_inner_products, TraceOptions};
use difflab::form::{assemble, DiscreteForm};
use difflab::mesh::Grid;
use difflab::region::RegionSet;
use difflab::scenario::{list_checks, run_scenario};
use difflab::LabError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: LabError) -> PyErr {
    match e {
        LabError::Solver { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A discretized form on a 1D or 2D grid.
#[pyclass(name = "Form", frozen)]
struct PyForm {
    form: DiscreteForm,
}

impl PyForm {
    fn region(&self, bounds: Vec<(f64, f64)>) -> PyResult<RegionSet> {
        RegionSet::from_box(self.form.grid(), &bounds).map_err(err)
    }
}

#[pymethods]
impl PyForm {
    /// Interval `[lo, hi]` with `n_cells` cells. `kind` is "constant" (uses
    /// `value`) or "c_delta" (uses `delta`).
    #[staticmethod]
    #[pyo3(signature = (lo, hi, n_cells, kind = "constant", value = 1.0, delta = 0.5))]
    fn line(
        lo: f64,
        hi: f64,
        n_cells: usize,
        kind: &str,
        value: f64,
        delta: f64,
    ) -> PyResult<Self> {
        let grid = Grid::new_1d(lo, hi, n_cells).map_err(err)?;
        let field = match kind {
            "constant" => CoefficientField::constant_scalar(1, value),
            "c_delta" => CoefficientField::c_delta(delta),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown coefficient kind {other:?}"
                )))
            }
        }
        .map_err(err)?;
        Ok(PyForm {
            form: assemble(&field, &grid, None).map_err(err)?,
        })
    }

    /// Square grid; `kind` is "constant" or "c_delta" (degenerate on the
    /// segment `|x| <= halfwidth, y = 0`).
    #[staticmethod]
    #[pyo3(signature = (lo, hi, n_cells, kind = "constant", value = 1.0, delta = 0.5, halfwidth = 1.0))]
    fn square(
        lo: [f64; 2],
        hi: [f64; 2],
        n_cells: [usize; 2],
        kind: &str,
        value: f64,
        delta: f64,
        halfwidth: f64,
    ) -> PyResult<Self> {
        let grid = Grid::new_2d(lo, hi, n_cells).map_err(err)?;
        let field = match kind {
            "constant" => CoefficientField::constant_scalar(2, value),
            "c_delta" => CoefficientField::c_delta_2d(delta, halfwidth),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown coefficient kind {other:?}"
                )))
            }
        }
        .map_err(err)?;
        Ok(PyForm {
            form: assemble(&field, &grid, None).map_err(err)?,
        })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.form.n_nodes()
    }

    fn positions(&self) -> Vec<Vec<f64>> {
        let g = self.form.grid();
        (0..g.n_nodes())
            .map(|n| g.position(n)[..g.dim()].to_vec())
            .collect()
    }

    fn energy(&self, phi: Vec<f64>) -> PyResult<f64> {
        self.form.energy(&phi).map_err(err)
    }

    /// Intrinsic distance between two boxes, each a list of `(lo, hi)` per axis.
    fn distance(&self, a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
        Ok(set_distance(&self.form, &self.region(a)?, &self.region(b)?)
            .map_err(err)?
            .value)
    }

    /// Effective resistance between the nodes nearest to `x` and `y`.
    fn resistance(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        let g = self.form.grid();
        effective_resistance(&self.form, g.nearest_node(&x), g.nearest_node(&y)).map_err(err)
    }

    /// `exp(-tH) phi`.
    #[pyo3(signature = (t, phi, tol = 1e-10))]
    fn semigroup(&self, py: Python<'_>, t: f64, phi: Vec<f64>, tol: f64) -> PyResult<Vec<f64>> {
        py.detach(|| apply_semigroup(&self.form, t, &phi, tol))
            .map_err(err)
    }

    /// Natural logs of `<exp(-tH) 1_A, 1_B>` and of their error bounds.
    fn trace(
        &self,
        py: Python<'_>,
        a: Vec<(f64, f64)>,
        b: Vec<(f64, f64)>,
        times: Vec<f64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (ra, rb) = (self.region(a)?, self.region(b)?);
        let tr = py
            .detach(|| trace_inner_products(&self.form, &ra, &rb, &times))
            .map_err(err)?;
        Ok((tr.log_values, tr.log_error_bounds))
    }

    /// Trace on the default fit window and the fitted squared distance.
    #[pyo3(signature = (a, b, count = 16))]
    fn varadhan<'py>(
        &self,
        py: Python<'py>,
        a: Vec<(f64, f64)>,
        b: Vec<(f64, f64)>,
        count: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (ra, rb) = (self.region(a)?, self.region(b)?);
        let run = py
            .detach(|| varadhan_run(&self.form, &ra, &rb, count, TraceOptions::default()))
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("distance", run.distance)?;
        d.set_item("hops", run.hops)?;
        d.set_item("fitted_d_squared", run.fit.fitted_d_squared)?;
        d.set_item("confidence", run.fit.confidence)?;
        d.set_item("r_squared", run.fit.r_squared)?;
        d.set_item("window", run.fit.window)?;
        match run.fit.verdict {
            FitVerdict::Resolved => d.set_item("lower_bound", py.None())?,
            FitVerdict::ExceedsResolvableBound { lower_bound } => {
                d.set_item("lower_bound", lower_bound)?
            }
        }
        d.set_item("times", run.trace.times)?;
        d.set_item("log_values", run.trace.log_values)?;
        Ok(d)
    }

    /// Fit window `(t_min, t_max)` for a distance realized by `hops` edges.
    #[staticmethod]
    #[pyo3(signature = (d, hops, max_hop = None, top_divisor = None))]
    fn fit_window(
        d: f64,
        hops: usize,
        max_hop: Option<f64>,
        top_divisor: Option<f64>,
    ) -> PyResult<(f64, f64)> {
        let def = WindowRule::default();
        let rule = WindowRule {
            max_hop: max_hop.unwrap_or(def.max_hop),
            top_divisor: top_divisor.unwrap_or(def.top_divisor),
        };
        rule.window(d, hops).map_err(err)
    }
}

/// Fit `-4 t ln(value)` against `t` on the times inside `[t_lo, t_hi]`.
#[pyfunction]
fn fit_squared_distance(
    py: Python<'_>,
    form: &PyForm,
    a: Vec<(f64, f64)>,
    b: Vec<(f64, f64)>,
    times: Vec<f64>,
    t_lo: f64,
    t_hi: f64,
) -> PyResult<(f64, f64)> {
    let (ra, rb) = (form.region(a)?, form.region(b)?);
    let tr = py
        .detach(|| trace_inner_products(&form.form, &ra, &rb, &times))
        .map_err(err)?;
    let fit = fit_varadhan_window(&tr, t_lo, t_hi).map_err(err)?;
    Ok((fit.fitted_d_squared, fit.confidence))
}

/// `(name, description)` for every scenario check, in a stable order.
#[pyfunction]
fn checks() -> Vec<(&'static str, &'static str)> {
    list_checks()
        .into_iter()
        .map(|c| (c.name, c.description))
        .collect()
}

/// Run a scenario file; returns the exit code the CLI would use and the output directory.
#[pyfunction]
#[pyo3(signature = (path, out = None))]
fn run(py: Python<'_>, path: PathBuf, out: Option<PathBuf>) -> PyResult<(i32, PathBuf)> {
    let res = py.detach(|| run_scenario(Path::new(&path), out.as_deref()));
    match res {
        Ok(summary) => Ok((summary.status().code(), summary.out_dir)),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

#[pymodule]
fn difflab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyForm>()?;
    m.add_function(wrap_pyfunction!(fit_squared_distance, m)?)?;
    m.add_function(wrap_pyfunction!(checks, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
