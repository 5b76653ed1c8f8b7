//! Python bindings: benchmark systems, scenarios, closed-loop runs and a few
//! coordinator primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hiercoord::closedloop::{self, ClosedLoopTrace, Scenario};
use hiercoord::coordinator::{self, CloudPoint, QuadKind};
use hiercoord::system::System;
use hiercoord::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::InvalidTopology(_)
        | Error::ScenarioMismatch(..) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A decomposed system: subsystem models, couplings and local controllers.
#[pyclass(name = "System", module = "hiercoord_py", frozen)]
struct PySystem {
    inner: System,
}

#[pymethods]
impl PySystem {
    /// The four-subsystem cold-box benchmark.
    #[staticmethod]
    fn coldbox_4ss() -> PyResult<Self> {
        Ok(Self {
            inner: closedloop::build_coldbox_4ss().map_err(to_py)?,
        })
    }

    /// The two-subsystem cold-box benchmark.
    #[staticmethod]
    fn coldbox_2ss() -> PyResult<Self> {
        Ok(Self {
            inner: closedloop::build_coldbox_2ss().map_err(to_py)?,
        })
    }

    /// Loads a system file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: hiercoord::config::load_system(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.inner.ts()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn subsystems(&self) -> Vec<String> {
        self.inner
            .subsystems()
            .iter()
            .map(|s| s.name.clone())
            .collect()
    }

    /// `(source, dest, signal names)` per coupling edge.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize, Vec<String>)> {
        self.inner
            .topology()
            .edges()
            .iter()
            .zip(self.inner.edge_signals())
            .map(|(e, names)| (e.source.0, e.dest.0, names.clone()))
            .collect()
    }

    /// Operating-point `(x, u, d)` per subsystem.
    fn operating_point(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        closedloop::operating_point(&self.inner)
    }

    /// One plant step; returns `(x_next, y, v)` per subsystem.
    fn step(
        &self,
        x: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let s = closedloop::step_plant(&self.inner, &x, &u, &d).map_err(to_py)?;
        Ok((s.x_next, s.y, s.v))
    }

    fn __repr__(&self) -> String {
        format!(
            "System(name={:?}, subsystems={}, edges={})",
            self.inner.name,
            self.inner.subsystems().len(),
            self.inner.topology().edges().len()
        )
    }
}

/// A closed-loop run description.
#[pyclass(name = "Scenario", module = "hiercoord_py")]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Scenario::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Scenario::parse(text, "<string>").map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: usize) -> PyResult<()> {
        let mut s = self.inner.clone();
        s.steps = steps;
        s.check().map_err(to_py)?;
        self.inner = s;
        Ok(())
    }

    /// Copy with coordinator settings replaced.
    #[pyo3(signature = (eps_max=None, sigma_max=None, grid_size=None))]
    fn with_coordinator(
        &self,
        eps_max: Option<f64>,
        sigma_max: Option<usize>,
        grid_size: Option<usize>,
    ) -> PyResult<Self> {
        let mut s = self.inner.clone();
        if let Some(v) = eps_max {
            s.coordinator.eps_max = v;
        }
        if let Some(v) = sigma_max {
            s.coordinator.sigma_max = v;
        }
        if let Some(v) = grid_size {
            s.coordinator.grid_size = v;
        }
        s.check().map_err(to_py)?;
        Ok(Self { inner: s })
    }
}

/// Recorded closed-loop run.
#[pyclass(name = "Trace", module = "hiercoord_py", frozen)]
struct PyTrace {
    inner: ClosedLoopTrace,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.clone()
    }

    #[getter]
    fn failure(&self) -> Option<String> {
        self.inner.failure.clone()
    }

    #[getter]
    fn output_names(&self) -> Vec<String> {
        self.inner.y_names.clone()
    }

    #[getter]
    fn input_names(&self) -> Vec<String> {
        self.inner.u_names.clone()
    }

    /// Output values per step.
    #[getter]
    fn outputs(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.y.clone()).collect()
    }

    /// Applied inputs per step.
    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.u.clone()).collect()
    }

    /// Optimized set-points per step.
    #[getter]
    fn setpoints(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.r_opt.clone()).collect()
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv_string().map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }
}

fn run(
    py: Python<'_>,
    plant: &PySystem,
    strategy: &PySystem,
    scenario: &PyScenario,
    hierarchical: bool,
) -> PyResult<PyTrace> {
    let (p, s, sc) = (&plant.inner, &strategy.inner, &scenario.inner);
    let trace = py.detach(|| {
        if hierarchical {
            closedloop::run_hierarchical(p, s, sc)
        } else {
            closedloop::run_decentralized(p, s, sc)
        }
    });
    Ok(PyTrace {
        inner: trace.map_err(to_py)?,
    })
}

/// Hierarchical run: coordinator optimizes set-points every period.
#[pyfunction]
fn run_hierarchical(
    py: Python<'_>,
    plant: &PySystem,
    strategy: &PySystem,
    scenario: &PyScenario,
) -> PyResult<PyTrace> {
    run(py, plant, strategy, scenario, true)
}

/// Decentralized baseline with frozen coupling estimates.
#[pyfunction]
fn run_decentralized(
    py: Python<'_>,
    plant: &PySystem,
    strategy: &PySystem,
    scenario: &PyScenario,
) -> PyResult<PyTrace> {
    run(py, plant, strategy, scenario, false)
}

/// Performance report of a trace as a dict.
#[pyfunction]
fn closed_loop_cost<'py>(
    py: Python<'py>,
    trace: &PyTrace,
    plant: &PySystem,
    scenario: &PyScenario,
) -> PyResult<Bound<'py, PyAny>> {
    let report =
        closedloop::closed_loop_cost(&trace.inner, &plant.inner, &scenario.inner).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Relaxation gain `min(1, kappa / (1 + rho))`.
#[pyfunction]
#[pyo3(signature = (rho, kappa=1.9))]
fn synthesize_filter(rho: f64, kappa: f64) -> PyResult<f64> {
    coordinator::synthesize_filter(rho, kappa).map_err(to_py)
}

/// Least-squares quadratic through `(r, cost)` samples; returns a dict with
/// the constant `c`, gradient `g`, Hessian `h` and the model `kind`.
#[pyfunction]
fn quadratic_fit<'py>(
    py: Python<'py>,
    points: Vec<(Vec<f64>, f64)>,
) -> PyResult<Bound<'py, PyDict>> {
    let cloud: Vec<CloudPoint> = points
        .into_iter()
        .map(|(r, cost)| CloudPoint {
            r,
            cost,
            trusted: true,
        })
        .collect();
    let m = coordinator::quadratic_fit(&cloud).map_err(to_py)?;
    let n = m.g.len();
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| m.h[(i, j)]).collect())
        .collect();
    let kind = match m.kind {
        QuadKind::Full => "full",
        QuadKind::Diagonal => "diagonal",
        QuadKind::Linear => "linear",
        QuadKind::Constant => "constant",
    };
    let d = PyDict::new(py);
    d.set_item("c", m.c)?;
    d.set_item("g", m.g.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("h", h)?;
    d.set_item("kind", kind)?;
    d.set_item("residual", m.residual)?;
    Ok(d)
}

#[pymodule]
fn hiercoord_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(run_hierarchical, m)?)?;
    m.add_function(wrap_pyfunction!(run_decentralized, m)?)?;
    m.add_function(wrap_pyfunction!(closed_loop_cost, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_filter, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_fit, m)?)?;
    Ok(())
}
