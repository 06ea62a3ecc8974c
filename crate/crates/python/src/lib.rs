//! Python bindings for the coda-match library.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use coda_match::coda::{self, Metric};
use coda_match::gps::{self, FitOptions};
use coda_match::io::{self, ColumnRoles};
use coda_match::matcher::{self, MatchSpec, PropensityTable};
use coda_match::pipeline::{self, BootstrapOptions, MatchOptions, RunConfig};
use coda_match::{effects, synth};

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_metric(name: &str) -> PyResult<Metric> {
    name.parse().map_err(value_error)
}

/// A strictly positive composition closed to sum 1.
#[pyclass(
    name = "Composition",
    module = "coda_match_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyComposition {
    inner: coda::Composition,
}

#[pymethods]
impl PyComposition {
    /// Closes `parts`. With `floor`, zeros are replaced by the floor first.
    #[new]
    #[pyo3(signature = (parts, floor = None))]
    fn new(parts: Vec<f64>, floor: Option<f64>) -> PyResult<Self> {
        let inner = match floor {
            Some(f) => coda::Composition::close_with_floor(&parts, f),
            None => coda::Composition::close(&parts),
        };
        inner.map(|inner| Self { inner }).map_err(value_error)
    }

    #[getter]
    fn parts(&self) -> Vec<f64> {
        self.inner.parts().to_vec()
    }

    fn clr(&self) -> Vec<f64> {
        self.inner.clr().coords().to_vec()
    }

    fn geometric_mean(&self) -> f64 {
        self.inner.geometric_mean()
    }

    fn perturb(&self, other: &PyComposition) -> PyResult<Self> {
        self.inner
            .perturb(&other.inner)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    #[pyo3(signature = (other, metric = "aitchison"))]
    fn distance(&self, other: &PyComposition, metric: &str) -> PyResult<f64> {
        parse_metric(metric)?
            .distance(&self.inner, &other.inner)
            .map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }

    fn __repr__(&self) -> String {
        format!("Composition({:?})", self.inner.parts())
    }
}

#[pyfunction]
fn aitchison_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let (a, b) = (close(a)?, close(b)?);
    coda::aitchison_distance(&a, &b).map_err(value_error)
}

#[pyfunction]
fn euclidean_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let (a, b) = (close(a)?, close(b)?);
    coda::euclidean_distance(&a, &b).map_err(value_error)
}

/// Centred log-ratio of the closure of `parts`.
#[pyfunction]
fn clr(parts: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(close(parts)?.clr().coords().to_vec())
}

fn close(parts: Vec<f64>) -> PyResult<coda::Composition> {
    coda::Composition::close(&parts).map_err(value_error)
}

/// Units with an id, a treatment level, an outcome and covariates.
#[pyclass(
    name = "Dataset",
    module = "coda_match_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyDataset {
    inner: coda_match::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (path, covariates, id = "id", treatment = "treatment", outcome = "outcome"))]
    fn from_csv(
        path: PathBuf,
        covariates: Vec<String>,
        id: &str,
        treatment: &str,
        outcome: &str,
    ) -> PyResult<Self> {
        let roles = ColumnRoles {
            id: id.into(),
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates,
        };
        io::load_csv(&path, &roles)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(value_error)?;
        io::write_csv(&self.inner, file).map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_levels(&self) -> usize {
        self.inner.n_levels()
    }

    #[getter]
    fn level_labels(&self) -> Vec<String> {
        self.inner.level_labels().to_vec()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    #[getter]
    fn ids(&self) -> Vec<i64> {
        self.inner.units().iter().map(|u| u.id).collect()
    }

    /// 1-based treatment level of each unit.
    #[getter]
    fn treatments(&self) -> Vec<usize> {
        self.inner.units().iter().map(|u| u.treatment).collect()
    }

    #[getter]
    fn outcomes(&self) -> Vec<f64> {
        self.inner.units().iter().map(|u| u.outcome).collect()
    }

    #[getter]
    fn covariates(&self) -> Vec<Vec<f64>> {
        self.inner
            .units()
            .iter()
            .map(|u| u.covariates.clone())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, levels={}, covariates={})",
            self.inner.len(),
            self.inner.n_levels(),
            self.inner.n_covariates()
        )
    }
}

/// Draws a synthetic dataset. Returns `(dataset, truth)` where `truth` holds
/// the generating coefficients and the ATT table (`truth["att"][t-1][s-1]`).
#[pyfunction]
#[pyo3(signature = (n, n_covariates, n_levels, beta, tau, noise_sd = 1.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    n: usize,
    n_covariates: usize,
    n_levels: usize,
    beta: Vec<f64>,
    tau: Vec<f64>,
    noise_sd: f64,
    seed: u64,
) -> PyResult<(PyDataset, Bound<'py, PyDict>)> {
    let config = synth::DgpConfig {
        n,
        n_covariates,
        n_levels,
        beta,
        tau,
        noise_sd,
        seed,
    };
    let (data, truth) = synth::generate(&config).map_err(value_error)?;
    let dict = PyDict::new(py);
    dict.set_item("beta", truth.beta)?;
    dict.set_item("att", truth.att)?;
    dict.set_item("expected_shares", truth.expected_shares)?;
    Ok((PyDataset { inner: data }, dict))
}

/// Fitted multinomial logit propensity model.
#[pyclass(name = "FittedGps", module = "coda_match_py", frozen)]
struct PyFittedGps {
    inner: gps::FittedGps,
}

#[pymethods]
impl PyFittedGps {
    /// Coefficient rows for levels 1..T-1, intercept first.
    #[getter]
    fn coefficients(&self) -> Vec<Vec<f64>> {
        let c = &self.inner.coefficients;
        (1..c.n_levels()).map(|t| c.row(t).to_vec()).collect()
    }

    #[getter]
    fn std_errors(&self) -> Vec<Vec<f64>> {
        let width = self.inner.coefficients.n_covariates() + 1;
        self.inner
            .std_errors
            .chunks(width)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Generalized propensity score of every unit, one row per unit.
    #[getter]
    fn gps(&self) -> Vec<Vec<f64>> {
        self.inner.gps.iter().map(|c| c.parts().to_vec()).collect()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn separation(&self) -> bool {
        self.inner.separation
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.log_likelihood
    }

    fn predict(&self, covariates: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .predict(&covariates)
            .map(|c| c.parts().to_vec())
            .map_err(value_error)
    }
}

#[pyfunction]
#[pyo3(signature = (data, max_iter = 100, grad_tol = 1e-8, ridge = 1e-8, standardize = true))]
fn fit(
    data: &PyDataset,
    max_iter: usize,
    grad_tol: f64,
    ridge: f64,
    standardize: bool,
) -> PyResult<PyFittedGps> {
    let options = FitOptions {
        max_iter,
        grad_tol,
        ridge,
        standardize,
    };
    gps::fit(&data.inner, &options)
        .map(|inner| PyFittedGps { inner })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Matches of one ordered pair of treatment levels.
#[pyclass(name = "MatchSet", module = "coda_match_py", frozen)]
struct PyMatchSet {
    inner: matcher::MatchSet,
}

#[pymethods]
impl PyMatchSet {
    /// `(treated_id, [comparison ids])` per matched treated unit.
    #[getter]
    fn matches(&self) -> Vec<(i64, Vec<i64>)> {
        self.inner
            .matches
            .iter()
            .map(|m| (m.treated_id, m.neighbours.iter().map(|n| n.id).collect()))
            .collect()
    }

    #[getter]
    fn distances(&self) -> Vec<Vec<f64>> {
        self.inner
            .matches
            .iter()
            .map(|m| m.neighbours.iter().map(|n| n.distance).collect())
            .collect()
    }

    #[getter]
    fn dropped(&self) -> Vec<i64> {
        self.inner.dropped.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.matches.len()
    }

    /// Average treatment effect on the treated for this pair.
    fn att(&self, data: &PyDataset) -> PyResult<f64> {
        effects::att(&self.inner, &data.inner)
            .map(|a| a.estimate)
            .map_err(value_error)
    }
}

#[pyfunction]
#[pyo3(signature = (data, fitted, target, comparison, metric = "aitchison", k = 1, replacement = true, caliper = None))]
#[allow(clippy::too_many_arguments)]
fn match_pair(
    data: &PyDataset,
    fitted: &PyFittedGps,
    target: usize,
    comparison: usize,
    metric: &str,
    k: usize,
    replacement: bool,
    caliper: Option<f64>,
) -> PyResult<PyMatchSet> {
    let table = PropensityTable::from_fit(&data.inner, &fitted.inner).map_err(value_error)?;
    let spec = MatchSpec {
        metric: parse_metric(metric)?,
        k,
        replacement,
        caliper,
        ..MatchSpec::new(target, comparison)
    };
    matcher::match_pair(&table, &spec)
        .map(|inner| PyMatchSet { inner })
        .map_err(value_error)
}

/// Runs the full pipeline on a CSV file and returns the JSON report.
#[pyfunction]
#[pyo3(signature = (
    path, covariates, id = "id", treatment = "treatment", outcome = "outcome",
    metric = "aitchison", k = 1, replacement = true, caliper = None, trim = None,
    bootstrap = None, seed = 0, allow_unconverged = false
))]
#[allow(clippy::too_many_arguments)]
fn run_report(
    py: Python<'_>,
    path: PathBuf,
    covariates: Vec<String>,
    id: &str,
    treatment: &str,
    outcome: &str,
    metric: &str,
    k: usize,
    replacement: bool,
    caliper: Option<f64>,
    trim: Option<f64>,
    bootstrap: Option<usize>,
    seed: u64,
    allow_unconverged: bool,
) -> PyResult<String> {
    let config = RunConfig {
        input: path,
        roles: ColumnRoles {
            id: id.into(),
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates,
        },
        matching: MatchOptions {
            metric: parse_metric(metric)?,
            k,
            replacement,
            caliper,
            trim,
        },
        fit: FitOptions::default(),
        bootstrap: bootstrap.map(|replicates| BootstrapOptions { replicates, seed }),
        allow_unconverged,
    };
    let report = py
        .detach(|| pipeline::run(&config))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string_pretty(&report).map_err(value_error)
}

#[pymodule]
fn coda_match_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", pipeline::TOOL_VERSION)?;
    m.add_class::<PyComposition>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFittedGps>()?;
    m.add_class::<PyMatchSet>()?;
    m.add_function(wrap_pyfunction!(aitchison_distance, m)?)?;
    m.add_function(wrap_pyfunction!(euclidean_distance, m)?)?;
    m.add_function(wrap_pyfunction!(clr, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(match_pair, m)?)?;
    m.add_function(wrap_pyfunction!(run_report, m)?)?;
    Ok(())
}
