//! Python bindings: the tape type plus the estimators, fits, propagator
//! operations, the shuffling null model and the synthetic generator.
//!
//! Curves and series come back as plain dicts of lists; the full study
//! summary is returned as a JSON string (and written to the output
//! directory alongside all CSV products).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

use microimpact::error::CoreError;
use microimpact::fit as corefit;
use microimpact::measure::{self, Binning, Scope};
use microimpact::nullmodel;
use microimpact::propagator;
use microimpact::study;
use microimpact::synth;
use microimpact::tape::{build_tape, read_processed_file, write_processed_file, FirmId};

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Config(_) | CoreError::Domain(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn scope_of(firm: Option<u32>) -> Scope {
    match firm {
        Some(id) => Scope::Firm(FirmId(id)),
        None => Scope::Market,
    }
}

/// An immutable processed trade tape.
#[pyclass(name = "Tape", frozen)]
struct PyTape {
    inner: microimpact::tape::Tape,
}

#[pymethods]
impl PyTape {
    /// Load a canonical processed tape file.
    #[staticmethod]
    #[pyo3(signature = (path, mean_spread, label = "STOCK"))]
    fn load(path: PathBuf, mean_spread: f64, label: &str) -> PyResult<Self> {
        let trades = read_processed_file(&path).map_err(to_py_err)?;
        let inner = build_tape(trades, label.to_string(), mean_spread).map_err(to_py_err)?;
        Ok(PyTape { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_processed_file(&path, self.inner.trades()).map_err(to_py_err)
    }

    #[getter]
    fn n_trades(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn stock_label(&self) -> String {
        self.inner.stock_label().to_string()
    }

    #[getter]
    fn mean_spread(&self) -> f64 {
        self.inner.mean_spread()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    fn firm_ids(&self) -> Vec<u32> {
        self.inner.firm_ids().map(|f| f.0).collect()
    }

    fn participation(&self, firm: u32) -> f64 {
        self.inner.participation(FirmId(firm))
    }

    fn active_firms(&self, floor: usize) -> Vec<u32> {
        self.inner.active_firms(floor).iter().map(|f| f.0).collect()
    }

    fn volumes(&self) -> Vec<f64> {
        self.inner.volumes()
    }

    fn signs(&self) -> Vec<f64> {
        self.inner.signs()
    }

    /// Permute trigger ids uniformly, preserving every firm's trade count.
    fn shuffle(&self, seed: u64) -> PyResult<Self> {
        Ok(PyTape {
            inner: nullmodel::shuffle_ids(&self.inner, seed).map_err(to_py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tape(label={:?}, n_trades={}, n_firms={})",
            self.inner.stock_label(),
            self.inner.len(),
            self.inner.firm_index().len()
        )
    }
}

/// Generate a synthetic tape from a manifest (TOML text).
#[pyfunction]
#[pyo3(signature = (manifest_toml, seed = None))]
fn simulate(manifest_toml: &str, seed: Option<u64>) -> PyResult<PyTape> {
    let mut manifest = synth::SyntheticManifest::from_toml_str(manifest_toml).map_err(to_py_err)?;
    if let Some(s) = seed {
        manifest.seed = s;
    }
    let out = synth::generate(&manifest).map_err(to_py_err)?;
    Ok(PyTape { inner: out.tape })
}

/// Conditional impact curve over log-spaced volume bins, in bps of spread.
#[pyfunction]
#[pyo3(signature = (tape, firm = None, n_bins = 25, min_count = 50))]
fn impact_curve<'py>(
    py: Python<'py>,
    tape: &PyTape,
    firm: Option<u32>,
    n_bins: usize,
    min_count: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let curve = measure::impact_curve(
        &tape.inner,
        scope_of(firm),
        &Binning { n_bins, min_count },
    )
    .map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("volume", curve.bin_mean_volume.clone())?;
    d.set_item("delta", curve.delta.clone())?;
    d.set_item("count", curve.count.clone())?;
    d.set_item("stderr", curve.stderr.clone())?;
    d.set_item("suppressed_bins", curve.suppressed_bins)?;
    Ok(d)
}

fn series_dict<'py>(py: Python<'py>, s: &measure::LagSeries) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("value", s.values.clone())?;
    d.set_item("count", s.counts.clone())?;
    d.set_item("stderr", s.stderr.clone())?;
    Ok(d)
}

/// Response function: mean signed quote move `l` ticks after a trade.
#[pyfunction]
#[pyo3(signature = (tape, max_lag, firm = None))]
fn response<'py>(
    py: Python<'py>,
    tape: &PyTape,
    max_lag: usize,
    firm: Option<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = measure::response(&tape.inner, scope_of(firm), max_lag).map_err(to_py_err)?;
    series_dict(py, &s)
}

/// Sign autocorrelation of the order flow.
#[pyfunction]
#[pyo3(signature = (tape, max_lag, firm = None))]
fn sign_correlation<'py>(
    py: Python<'py>,
    tape: &PyTape,
    max_lag: usize,
    firm: Option<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = measure::sign_correlation(&tape.inner, scope_of(firm), max_lag).map_err(to_py_err)?;
    series_dict(py, &s)
}

fn fit_dict<'py>(py: Python<'py>, f: &corefit::PowerLawFit) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("coefficient", f.coefficient)?;
    d.set_item("exponent", f.exponent)?;
    d.set_item("stderr_exponent", f.stderr_exponent)?;
    d.set_item("r_squared", f.r_squared)?;
    d.set_item("excluded_points", f.excluded_points)?;
    d.set_item("n_points", f.n_points)?;
    Ok(d)
}

/// Count-weighted log-log power-law fit of `y = c x^alpha`.
#[pyfunction]
#[pyo3(signature = (x, y, weight = None, window = None))]
fn fit_power_law<'py>(
    py: Python<'py>,
    x: Vec<f64>,
    y: Vec<f64>,
    weight: Option<Vec<f64>>,
    window: Option<(f64, f64)>,
) -> PyResult<Bound<'py, PyDict>> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y must have the same length"));
    }
    let w = weight.unwrap_or_else(|| vec![1.0; x.len()]);
    if w.len() != x.len() {
        return Err(PyValueError::new_err("weight must match x in length"));
    }
    let points: Vec<(f64, f64, f64)> = x
        .iter()
        .zip(&y)
        .zip(&w)
        .map(|((a, b), c)| (*a, *b, *c))
        .collect();
    let fit = corefit::fit_power_law(&points, window).map_err(to_py_err)?;
    fit_dict(py, &fit)
}

/// Maximum-likelihood fit of the mean-one scaled volume law.
#[pyfunction]
fn scaling_function_fit<'py>(py: Python<'py>, samples: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let fit = corefit::scaling_function_fit(&samples).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("a", fit.a)?;
    d.set_item("b", fit.b)?;
    d.set_item("gamma", fit.gamma)?;
    d.set_item("stderr_gamma", fit.stderr_gamma)?;
    d.set_item("log_likelihood", fit.log_likelihood)?;
    d.set_item("n", fit.n)?;
    Ok(d)
}

/// Moment factor of the scaled volume law.
#[pyfunction]
fn gamma_factor(alpha: f64, gamma: f64) -> PyResult<f64> {
    corefit::gamma_factor(alpha, gamma).map_err(to_py_err)
}

/// Predicted average impact from the fitted impact law and volume scale.
#[pyfunction]
fn predicted_mean_impact(c: f64, alpha: f64, mean_volume: f64, gamma: f64) -> PyResult<f64> {
    corefit::predicted_mean_impact(c, alpha, mean_volume, gamma).map_err(to_py_err)
}

/// Critical kernel decay exponent `(1 - gamma) / 2`.
#[pyfunction]
fn critical_beta(gamma: f64) -> PyResult<f64> {
    propagator::critical_beta(gamma).map_err(to_py_err)
}

/// Forward response reconstruction from a kernel and a correlation series.
#[pyfunction]
#[pyo3(signature = (kernel, correlation, r0, max_lag, horizon, ri0 = None))]
fn reconstruct_response(
    kernel: Vec<f64>,
    correlation: Vec<f64>,
    r0: f64,
    max_lag: usize,
    horizon: usize,
    ri0: Option<f64>,
) -> PyResult<Vec<f64>> {
    let k = propagator::Kernel::new(kernel, propagator::Extrapolation::HoldLast)
        .map_err(to_py_err)?;
    let r = propagator::reconstruct_response(&k, &correlation, r0, ri0, max_lag, horizon)
        .map_err(to_py_err)?;
    Ok(r.values)
}

/// Solve the propagator model for the bare kernel from measured series.
#[pyfunction]
#[pyo3(signature = (response, correlation, r0, l_max, horizon, ridge = 0.0, fit_window = None))]
#[allow(clippy::too_many_arguments)]
fn invert_kernel<'py>(
    py: Python<'py>,
    response: Vec<f64>,
    correlation: Vec<f64>,
    r0: f64,
    l_max: usize,
    horizon: usize,
    ridge: f64,
    fit_window: Option<(usize, usize)>,
) -> PyResult<Bound<'py, PyDict>> {
    let kernel = propagator::invert_kernel(
        &response,
        &correlation,
        r0,
        None,
        l_max,
        horizon,
        ridge,
        fit_window,
    )
    .map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("values", kernel.values().to_vec())?;
    if let Some(fit) = &kernel.fit {
        let f = PyDict::new(py);
        f.set_item("gamma0", fit.gamma0)?;
        f.set_item("l0", fit.l0)?;
        f.set_item("beta", fit.beta)?;
        f.set_item("stderr_beta", fit.stderr_beta)?;
        d.set_item("fit", f)?;
    }
    Ok(d)
}

/// Run the full study pipeline over a tape, writing all products into
/// `out_dir`; returns the summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (tape, out_dir, config_toml = None))]
fn run_study(tape: &PyTape, out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<String> {
    let cfg = match config_toml {
        Some(text) => study::StudyConfig::from_toml_str(text).map_err(to_py_err)?,
        None => study::StudyConfig::default(),
    };
    let summary = study::run_study(&tape.inner, &cfg, &out_dir).map_err(to_py_err)?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn _microimpact(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTape>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(impact_curve, m)?)?;
    m.add_function(wrap_pyfunction!(response, m)?)?;
    m.add_function(wrap_pyfunction!(sign_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_function_fit, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_factor, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_mean_impact, m)?)?;
    m.add_function(wrap_pyfunction!(critical_beta, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_response, m)?)?;
    m.add_function(wrap_pyfunction!(invert_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    Ok(())
}
