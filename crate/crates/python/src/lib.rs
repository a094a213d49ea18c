//! Python bindings: datasets, meta-learners, fitted CATE models, simulation
//! draws, bootstrap bands and the study runner.

use misscate::bootstrap::half_sample_bootstrap;
use misscate::data::{load_csv, CsvSchema, Dataset};
use misscate::error::Error;
use misscate::meta::{
    estimate_cate, fit_nuisance_bundle, median_aggregate, predict_cate, CateModel, MetaLearnerSpec, PipelineConfig,
};
use misscate::sim::{self, DgpId, StudyConfig};
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, p), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_name<T: serde::de::DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_owned())).map_err(json_err)
}

#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Covariates `z` as a list of rows; `outcome` holds `None` where the
    /// outcome is missing. `x_cols` indexes the heterogeneity covariates.
    #[new]
    #[pyo3(signature = (z, treatment, observed, outcome, x_cols=None))]
    fn new(
        z: Vec<Vec<f64>>,
        treatment: Vec<bool>,
        observed: Vec<bool>,
        outcome: Vec<Option<f64>>,
        x_cols: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let z = matrix(z)?;
        let x_cols = x_cols.unwrap_or_else(|| (0..z.ncols()).collect());
        let inner = Dataset::new(z, treatment, observed, outcome, x_cols).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, treatment_col="a", missing_col="c", outcome_col="y", x_cols=None))]
    fn from_csv(
        path: &str,
        treatment_col: &str,
        missing_col: &str,
        outcome_col: &str,
        x_cols: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let mut schema = CsvSchema::new(treatment_col, missing_col, outcome_col);
        schema.x_cols = x_cols;
        Ok(Self {
            inner: load_csv(path, &schema).map_err(to_py)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    #[getter]
    fn heterogeneity_index(&self) -> Vec<usize> {
        self.inner.heterogeneity_index().to_vec()
    }

    #[getter]
    fn treatment(&self) -> Vec<bool> {
        self.inner.treatment().to_vec()
    }

    #[getter]
    fn observed(&self) -> Vec<bool> {
        self.inner.observed().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<Option<f64>> {
        self.inner.outcome().to_vec()
    }

    fn x_matrix(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.x_matrix())
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        let observed = self.inner.observed().iter().filter(|&&c| c).count();
        format!(
            "Dataset(n={}, covariates={}, observed={observed})",
            self.inner.n(),
            self.inner.covariate_names().len()
        )
    }
}

#[pyclass(name = "CateModel", frozen)]
pub struct PyCateModel {
    inner: CateModel,
}

#[pymethods]
impl PyCateModel {
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(x)?;
        py.detach(|| predict_cate(&self.inner, x.view())).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn x_dim(&self) -> usize {
        self.inner.x_dim()
    }

    fn __repr__(&self) -> String {
        format!("CateModel(variant={}, seed={})", self.inner.variant(), self.inner.seed())
    }
}

#[pyclass(name = "MetaLearner", frozen)]
pub struct PyMetaLearner {
    spec: MetaLearnerSpec,
}

#[pymethods]
impl PyMetaLearner {
    /// `pipeline` is a JSON object with the same fields as the CLI config.
    #[new]
    #[pyo3(signature = (learner="mdr", missing_policy="native", pipeline=None, seeds=None))]
    fn new(learner: &str, missing_policy: &str, pipeline: Option<&str>, seeds: Option<Vec<u64>>) -> PyResult<Self> {
        let mut spec = MetaLearnerSpec::new(parse_name(learner)?, parse_name(missing_policy)?);
        if let Some(p) = pipeline {
            spec.pipeline = serde_json::from_str::<PipelineConfig>(p).map_err(json_err)?;
        }
        spec.seeds = seeds.unwrap_or_default();
        spec.validate().map_err(to_py)?;
        Ok(Self { spec })
    }

    #[pyo3(signature = (data, seed=0))]
    fn fit(&self, py: Python<'_>, data: &PyDataset, seed: u64) -> PyResult<PyCateModel> {
        let inner = py.detach(|| estimate_cate(&self.spec, &data.inner, seed)).map_err(to_py)?;
        Ok(PyCateModel { inner })
    }

    /// Row-wise median over the learner's seeds of predictions at `x`.
    fn fit_predict_median(&self, py: Python<'_>, data: &PyDataset, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(x)?;
        let seeds = if self.spec.seeds.is_empty() {
            vec![0]
        } else {
            self.spec.seeds.clone()
        };
        let est = py
            .detach(|| median_aggregate(&self.spec, &data.inner, &seeds, x.view()))
            .map_err(to_py)?;
        Ok(est.median)
    }

    #[getter]
    fn variant(&self) -> PyResult<String> {
        Ok(self.spec.variant().map_err(to_py)?.to_string())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.spec).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "MetaLearner({}-{})",
            self.spec.learner.as_str(),
            self.spec.missing_policy.as_str()
        )
    }
}

/// Draws `n` rows from a named simulation design; returns the dataset and
/// the true effects.
#[pyfunction]
#[pyo3(signature = (dgp, n, seed=0, censor=true))]
fn simulate(dgp: &str, n: usize, seed: u64, censor: bool) -> PyResult<(PyDataset, Vec<f64>)> {
    let id: DgpId = parse_name(dgp)?;
    let d = sim::draw(id, n, seed, censor).map_err(to_py)?;
    Ok((PyDataset { inner: d.data }, d.truth.theta))
}

/// Simultaneous half-sample bootstrap band over the rows of `x`.
#[pyfunction]
#[pyo3(signature = (learner, data, x, draws=100, alpha=0.05, seed=0))]
fn bootstrap_band<'py>(
    py: Python<'py>,
    learner: &PyMetaLearner,
    data: &PyDataset,
    x: Vec<Vec<f64>>,
    draws: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let x = matrix(x)?;
    let spec = &learner.spec;
    let band = py
        .detach(|| {
            let variant = spec.variant()?;
            let bundle = fit_nuisance_bundle(&data.inner, &spec.pipeline, variant.needs_imputation(), seed)?;
            half_sample_bootstrap(variant, &spec.pipeline, &data.inner, &bundle, draws, alpha, x.view(), seed)
        })
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("theta_hat", band.theta_hat)?;
    out.set_item("lower", band.lower)?;
    out.set_item("upper", band.upper)?;
    out.set_item("lambda_hat", band.lambda_hat)?;
    out.set_item("degenerate", band.degenerate)?;
    out.set_item("critical_value", band.cv_alpha)?;
    out.set_item("alpha", band.alpha)?;
    out.set_item("draws", band.draws)?;
    Ok(out)
}

/// Runs a simulation study from a JSON config; returns the report as JSON.
#[pyfunction]
fn run_study(py: Python<'_>, config: &str) -> PyResult<String> {
    let config: StudyConfig = serde_json::from_str(config).map_err(json_err)?;
    let report = py.detach(|| sim::run_study(&config)).map_err(to_py)?;
    report.to_json().map_err(to_py)
}

#[pyfunction]
fn rmsme(estimates: Vec<Vec<f64>>, truth: Vec<f64>) -> PyResult<f64> {
    sim::rmsme(&estimates, &truth).map_err(to_py)
}

#[pyfunction]
fn rmse_mean(estimates: Vec<Vec<f64>>, truth: Vec<f64>) -> PyResult<f64> {
    sim::rmse_mean(&estimates, &truth).map_err(to_py)
}

#[pymodule]
fn pymisscate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMetaLearner>()?;
    m.add_class::<PyCateModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_band, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(rmsme, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_mean, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
