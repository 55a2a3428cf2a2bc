//! Python bindings: experiments from config text, ensemble runs, the exact
//! single-excitation solver and the noise generators.

use std::path::PathBuf;

use hiercoh::config::{self, Experiment as CoreExperiment};
use hiercoh::ensemble::{self, EnsembleResult as CoreResult};
use hiercoh::exact1x;
use hiercoh::measures;
use hiercoh::noise_gen::{self, TimeGrid};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: hiercoh::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// A validated experiment: preset defaults, then file values, then overrides.
#[pyclass(name = "Experiment", frozen)]
struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    #[staticmethod]
    #[pyo3(signature = (text, preset=None, overrides=Vec::new()))]
    fn from_text(text: &str, preset: Option<&str>, overrides: Vec<(String, String)>) -> PyResult<Self> {
        let ov: Vec<(&str, String)> = overrides.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        config::parse_str(text, preset, &ov).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (path, preset=None))]
    fn from_file(path: PathBuf, preset: Option<&str>) -> PyResult<Self> {
        config::parse_config(&path, preset, &[]).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn preset(&self) -> &'static str {
        self.inner.preset.name.name()
    }

    #[getter]
    fn n_traj(&self) -> usize {
        self.inner.config.n_traj
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config.config_hash()
    }

    /// Sweep key and values, if the experiment has a sweep.
    #[getter]
    fn sweep(&self) -> Option<(String, Vec<f64>)> {
        self.inner.sweep.as_ref().map(|s| (s.key.clone(), s.values.clone()))
    }

    /// Canonical configuration text; parses back to the same experiment.
    fn emit(&self) -> String {
        self.inner.emit()
    }

    /// Runs the base configuration with `key = value` assignments applied.
    #[pyo3(signature = (assignments=Vec::new(), threads=None))]
    fn run_ensemble(&self, py: Python<'_>, assignments: Vec<(String, f64)>, threads: Option<usize>) -> PyResult<EnsembleResult> {
        let a: Vec<(&str, f64)> = assignments.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let cfg = self.inner.config_with(&a).map_err(to_py)?;
        let r = py
            .detach(|| match threads.or(self.inner.threads) {
                Some(n) => ensemble::run_ensemble_with_threads(&cfg, n),
                None => ensemble::run_ensemble(&cfg),
            })
            .map_err(to_py)?;
        Ok(EnsembleResult { inner: r })
    }

    /// Noise-free single-trajectory reference for the base configuration.
    fn run_baseline(&self, py: Python<'_>) -> PyResult<EnsembleResult> {
        let cfg = CoreExperiment::baseline_of(&self.inner.config);
        let r = py.detach(|| ensemble::run_ensemble(&cfg)).map_err(to_py)?;
        Ok(EnsembleResult { inner: r })
    }

    /// Runs the full preset and returns the written file paths.
    fn run_preset(&self, py: Python<'_>, out_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        py.detach(|| config::run_preset(&self.inner, &out_dir)).map_err(to_py)
    }

    /// `(t, A, B)` of trajectory `index` from the exact single-excitation solver.
    fn exact_trajectory(&self, index: usize) -> PyResult<Vec<(f64, (f64, f64), (f64, f64))>> {
        let states = ensemble::exact_trajectory(&self.inner.config, index).map_err(to_py)?;
        Ok(states.iter().map(|s| (s.t, (s.a.re, s.a.im), (s.b.re, s.b.im))).collect())
    }

    fn __repr__(&self) -> String {
        format!("Experiment(preset={}, hash={})", self.preset(), &self.config_hash()[..12])
    }
}

/// Trajectory-averaged observables of one ensemble run.
#[pyclass(name = "EnsembleResult", frozen)]
struct EnsembleResult {
    inner: CoreResult,
}

#[pymethods]
impl EnsembleResult {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    #[getter]
    fn coherence(&self) -> Vec<f64> {
        self.inner.coherence()
    }

    #[getter]
    fn coherence_stderr(&self) -> Vec<f64> {
        self.inner.coherence_stderr()
    }

    #[getter]
    fn negativity(&self) -> Vec<f64> {
        self.inner.mean.iter().map(|r| r.negativity).collect()
    }

    #[getter]
    fn n_traj(&self) -> usize {
        self.inner.n_traj
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    /// `(max_trace_error, max_hermiticity_error, max_leakage, min_diagonal)`.
    #[getter]
    fn invariants(&self) -> (f64, f64, f64, f64) {
        let i = self.inner.invariants;
        (i.max_trace_error, i.max_hermiticity_error, i.max_leakage, i.min_diagonal)
    }

    fn invariants_hold(&self) -> bool {
        self.inner.invariants.holds()
    }

    /// Windowed mean of `coherence - baseline` over `[t0, t1]` with its error.
    fn windowed_delta(&self, baseline: &EnsembleResult, t0: f64, t1: f64) -> PyResult<(f64, f64)> {
        ensemble::windowed_delta(&self.inner, &baseline.inner, t0, t1)
            .map(|e| (e.value, e.stderr))
            .map_err(to_py)
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Ornstein-Uhlenbeck path with `⟨x(t)x(s)⟩ = (Γγ/2) e^{-γ|t-s|}`.
#[pyfunction]
fn sample_ou(strength: f64, gamma: f64, dt: f64, n_steps: usize, seed: u64) -> PyResult<Vec<f64>> {
    let grid = TimeGrid::new(0.0, dt, n_steps).map_err(to_py)?;
    noise_gen::sample_ou(strength, gamma, grid, seed).map(|p| p.real_parts()).map_err(to_py)
}

/// Telegraph path `±amplitude` that flips with probability `p` every `flip_interval`.
#[pyfunction]
fn sample_telegraph(p: f64, amplitude: f64, flip_interval: f64, dt: f64, n_steps: usize, seed: u64) -> PyResult<Vec<f64>> {
    let grid = TimeGrid::new(0.0, dt, n_steps).map_err(to_py)?;
    noise_gen::sample_telegraph(p, amplitude, flip_interval, grid, seed)
        .map(|p| p.real_parts())
        .map_err(to_py)
}

/// `(|AC*|, 4|A|²|B|²)` for the pure state `A|e,0⟩ + B|g,1⟩ + C|g,0⟩`.
#[pyfunction]
fn pure_state_measures(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> (f64, f64) {
    let z = |(re, im): (f64, f64)| num_complex::Complex64::new(re, im);
    let s = exact1x::Amplitudes { a: z(a), b: z(b), c: z(c), i: num_complex::Complex64::new(0.0, 0.0), t: 0.0 };
    (exact1x::coherence_1x(&s), exact1x::concurrence_1x(&s))
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> f64 {
    measures::pearson(&x, &y)
}

#[pymodule]
fn pyhiercoh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Experiment>()?;
    m.add_class::<EnsembleResult>()?;
    m.add_function(wrap_pyfunction!(sample_ou, m)?)?;
    m.add_function(wrap_pyfunction!(sample_telegraph, m)?)?;
    m.add_function(wrap_pyfunction!(pure_state_measures, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    Ok(())
}
