use std::path::Path;

use gk_hydro::harness::{self, Command, ExperimentConfig, RunManifest};
use gk_hydro::rates::RateModelSpec;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: gk_hydro::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

fn parse(command: &str, config: &str) -> PyResult<(Command, ExperimentConfig)> {
    let command: Command = command.parse().map_err(to_py)?;
    Ok((command, ExperimentConfig::from_toml(config).map_err(to_py)?))
}

/// Names of the available commands.
#[pyfunction]
fn commands() -> Vec<&'static str> {
    Command::ALL.iter().map(Command::name).collect()
}

/// Check a TOML configuration for `command`; raises `ValueError` if invalid.
#[pyfunction]
fn validate(command: &str, config: &str) -> PyResult<()> {
    let (command, cfg) = parse(command, config)?;
    cfg.validate(command).map_err(to_py)
}

/// Run `command` from TOML text, writing into `out`. Returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (command, config, out, seed=None))]
fn run(py: Python<'_>, command: &str, config: &str, out: &str, seed: Option<u64>) -> PyResult<String> {
    let (command, mut cfg) = parse(command, config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = py.detach(|| harness::run(command, &cfg, Some(Path::new(out)))).map_err(to_py)?;
    Ok(serde_json::to_string(&manifest).expect("manifest serializes"))
}

/// Render the text report of a manifest given as JSON.
#[pyfunction]
fn report(manifest: &str) -> PyResult<String> {
    let m: RunManifest = serde_json::from_str(manifest).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(harness::report(&m).text)
}

/// Reaction term f(ρ) of a model preset at the given densities.
#[pyfunction]
#[pyo3(signature = (rho, preset="bistable-ssep", dim=1, lam=1.0))]
fn reaction(rho: Vec<f64>, preset: &str, dim: usize, lam: f64) -> PyResult<Vec<f64>> {
    let spec = RateModelSpec {
        dim,
        preset: Some(preset.to_string()),
        lambda: Some(lam),
        exchange: None,
        flip_plus: None,
        flip_minus: None,
    };
    let f = spec.build().map_err(to_py)?.reaction_term();
    Ok(rho.iter().map(|&r| f.eval(r)).collect())
}

#[pymodule]
fn gk_hydro_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", harness::CODE_VERSION)?;
    m.add_function(wrap_pyfunction!(commands, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(reaction, m)?)?;
    Ok(())
}
