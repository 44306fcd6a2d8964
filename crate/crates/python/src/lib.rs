//! Python module `pyktsim`: run scenarios and evaluate predictions.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ktsim::accounting::Report;
use ktsim::predict::{parse_params, predict as evaluate};
use ktsim::scenario::{Overrides, Scenario, BUNDLED};
use ktsim::simnet::engine;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Names of the bundled scenarios.
#[pyfunction]
fn list_scenarios() -> Vec<&'static str> {
    BUNDLED.to_vec()
}

/// Runs a bundled scenario or scenario file and returns the metrics as JSON.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, trials=None, epochs=None))]
fn run(
    py: Python<'_>,
    scenario: &str,
    seed: Option<u64>,
    trials: Option<u64>,
    epochs: Option<u64>,
) -> PyResult<String> {
    let mut sc = Scenario::resolve(scenario).map_err(err)?;
    sc.apply(Overrides { seed, trials, epochs }).map_err(err)?;
    let (m, _) = py.detach(|| engine::run(&sc)).map_err(err)?;
    Ok(m.to_json())
}

/// Evaluates a closed form; returns `(exact, value)`.
#[pyfunction]
fn predict(formula: &str, params: &str) -> PyResult<(String, f64)> {
    let p = parse_params(params).map_err(err)?;
    let r = evaluate(formula, &p).map_err(err)?;
    Ok((r.exact, r.value))
}

/// Closed-form and simulated traffic for a scenario, as JSON.
#[pyfunction]
fn account(py: Python<'_>, scenario: &str) -> PyResult<String> {
    let sc = Scenario::resolve(scenario).map_err(err)?;
    let (m, _) = py.detach(|| engine::run(&sc)).map_err(err)?;
    serde_json::to_string(&Report::new(&sc, &m)).map_err(err)
}

#[pymodule]
fn pyktsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(account, m)?)?;
    Ok(())
}
