//! Python module `ftmix`: configuration helpers and the run commands.

use std::path::PathBuf;

use ftmix_core::desk::DeskConfig;
use ftmix_core::error::Error;
use ftmix_core::run::{self, AttackName, RunConfig, DESK_PRESET, PAPER_PRESET};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(ftmix, FtmixError, PyException);
create_exception!(ftmix, ConfigError, FtmixError);
create_exception!(ftmix, ModelError, FtmixError);
create_exception!(ftmix, EvaluationError, FtmixError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        3 => ModelError::new_err(msg),
        4 => EvaluationError::new_err(msg),
        _ => FtmixError::new_err(msg),
    }
}

/// Convert a serializable value to Python objects through JSON.
fn to_object<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| FtmixError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load(config: Option<PathBuf>, preset: Option<&str>, overrides: Vec<String>) -> PyResult<RunConfig> {
    let cfg = match (config, preset) {
        (Some(p), _) => RunConfig::load(&p, &overrides),
        (None, Some("paper")) => RunConfig::from_toml_with(PAPER_PRESET, None, &overrides),
        (None, Some("desk") | None) => RunConfig::from_toml_with(DESK_PRESET, None, &overrides),
        (None, Some(o)) => Err(Error::config("preset", format!("unknown preset `{o}`"))),
    }
    .map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Text of a built-in preset (`paper` or `desk`).
#[pyfunction]
fn preset(name: &str) -> PyResult<&'static str> {
    match name {
        "paper" => Ok(PAPER_PRESET),
        "desk" => Ok(DESK_PRESET),
        o => Err(ConfigError::new_err(format!("unknown preset `{o}`"))),
    }
}

/// Transform names and feature mode of a named attack.
#[pyfunction]
fn pipeline<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    let a: AttackName = name.parse().map_err(to_py)?;
    let (t, m) = a
        .pipeline()
        .ok_or_else(|| ConfigError::new_err("custom pipelines take transforms from the configuration"))?;
    to_object(py, &(t, m))
}

/// Resolved run configuration as a dict, with the expanded attack parameters
/// under `expanded`.
#[pyfunction]
#[pyo3(signature = (config=None, preset=None, overrides=Vec::new()))]
fn resolve_config<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    preset: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load(config, preset, overrides)?;
    let expanded = cfg.attack_config().map_err(to_py)?;
    let d = to_object(py, &cfg)?;
    d.set_item("expanded", to_object(py, &expanded)?)?;
    Ok(d)
}

/// Craft adversarial examples; returns the attack summary.
#[pyfunction]
#[pyo3(signature = (config=None, preset=None, overrides=Vec::new()))]
fn attack<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    preset: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load(config, preset, overrides)?;
    let s = py.detach(|| run::cmd_attack(&cfg)).map_err(to_py)?;
    to_object(py, &s)
}

/// Evaluate a finished run; returns the transfer report.
#[pyfunction]
#[pyo3(signature = (run_dir, targets=Vec::new()))]
fn evaluate<'py>(py: Python<'py>, run_dir: PathBuf, targets: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| run::cmd_evaluate(&run_dir, &targets)).map_err(to_py)?;
    to_object(py, &r)
}

/// Train the desk zoo into `out_dir`; returns the training report.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, epochs=None, train_size=None, test_size=None, eval_size=None, models=None, min_accuracy=None))]
#[allow(clippy::too_many_arguments)]
fn prepare_desk<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    seed: u64,
    epochs: Option<usize>,
    train_size: Option<usize>,
    test_size: Option<usize>,
    eval_size: Option<usize>,
    models: Option<Vec<String>>,
    min_accuracy: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let d = DeskConfig::default();
    let cfg = DeskConfig {
        seed,
        epochs: epochs.unwrap_or(d.epochs),
        train_size: train_size.unwrap_or(d.train_size),
        eval_size: eval_size.unwrap_or(d.eval_size),
        test_size: test_size.unwrap_or(d.test_size),
        min_accuracy: min_accuracy.unwrap_or(d.min_accuracy),
        models,
        ..d
    };
    let r = py.detach(|| run::cmd_prepare_desk(&cfg, &out_dir)).map_err(to_py)?;
    to_object(py, &r)
}

/// Cost/success scatter over finished runs.
#[pyfunction]
fn report<'py>(py: Python<'py>, runs: Vec<PathBuf>, out_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let p = py.detach(|| run::cmd_report(&runs, &out_dir)).map_err(to_py)?;
    to_object(py, &p)
}

#[pymodule]
fn ftmix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("FtmixError", m.py().get_type::<FtmixError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("ModelError", m.py().get_type::<ModelError>())?;
    m.add("EvaluationError", m.py().get_type::<EvaluationError>())?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_desk, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
