//! Python module `hkflow` over the core crate.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hkflow_core::harness::{self, RunConfig};
use hkflow_core::{diagnostics, gate, geometry, io, Error, ScalarField};

fn py_err(e: Error) -> PyErr {
    if harness::exit_code_for(&e) == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(format!("{} ({})", e, e.kind()))
    }
}

/// Run a JSON configuration; returns `(exit_code, manifest_json)`.
#[pyfunction]
fn run(py: Python<'_>, config_json: &str) -> PyResult<(u8, String)> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    let out = py.detach(|| harness::run(&cfg)).map_err(py_err)?;
    let manifest = serde_json::to_string(&out.manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((out.exit_code(), manifest))
}

/// Barrier threshold for a fixture with zero `u`; `None` when unbounded.
#[pyfunction]
#[pyo3(signature = (fixture, theta, nodes=None))]
fn gate_threshold(py: Python<'_>, fixture: &str, theta: f64, nodes: Option<usize>) -> PyResult<Option<f64>> {
    py.detach(|| {
        let p = harness::resolve_problem(fixture, nodes)?;
        let u = ScalarField::zeros(p.grid());
        gate::sb_estimate(&p.metric, &u, theta).map(|r| r.s_max)
    })
    .map_err(py_err)
}

/// Eigenvalues of β relative to g at one node, descending.
#[pyfunction]
#[pyo3(signature = (fixture, probe=0, nodes=None))]
fn beta_eigenvalues(fixture: &str, probe: usize, nodes: Option<usize>) -> PyResult<Vec<f64>> {
    let p = harness::resolve_problem(fixture, nodes).map_err(py_err)?;
    if probe >= p.grid().len() {
        return Err(PyValueError::new_err(format!("probe {probe} out of range")));
    }
    diagnostics::beta_eigenvalues(&p.metric, probe).map_err(py_err)
}

/// `log det g` at every node, in storage order.
#[pyfunction]
#[pyo3(signature = (fixture, nodes=None))]
fn log_det(fixture: &str, nodes: Option<usize>) -> PyResult<Vec<f64>> {
    let p = harness::resolve_problem(fixture, nodes).map_err(py_err)?;
    let f = geometry::log_det_field(&p.metric).map_err(py_err)?;
    Ok(f.values().to_vec())
}

/// Rows `(s, f, psi, frak)` of the cutoff profile on `points` samples of [0, 1).
#[pyfunction]
#[pyo3(signature = (kappa, points=64))]
fn cutoff_table(kappa: f64, points: usize) -> PyResult<Vec<[f64; 4]>> {
    Ok(gate::build_cutoff(kappa).map_err(py_err)?.table(points))
}

/// `(dim, nodes, rank, values)` of a binary field file.
#[pyfunction]
fn read_field(path: &str) -> PyResult<(usize, usize, u32, Vec<f64>)> {
    let d = io::read_field(Path::new(path)).map_err(py_err)?;
    Ok((d.grid.dim(), d.grid.nodes_per_axis(), d.rank, d.values))
}

#[pymodule]
fn hkflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(beta_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(log_det, m)?)?;
    m.add_function(wrap_pyfunction!(cutoff_table, m)?)?;
    m.add_function(wrap_pyfunction!(read_field, m)?)?;
    Ok(())
}
