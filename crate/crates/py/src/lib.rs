//! Python bindings: datasets, encoders, training, evaluation and the loss
//! functions. Configs and reports cross the boundary as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use mca_lab::config::LabConfig;
use mca_lab::data::{self, DatasetBundle, EvalSplit, GeneratorConfig};
use mca_lab::eval::{embed_groups, evaluate, pca_project};
use mca_lab::model::{load_checkpoint, save_checkpoint, EncoderParams};
use mca_lab::objectives;
use mca_lab::train::{run_training, TrainConfig, TrainPaths};

fn py_err(e: mca_lab::Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("invalid config: {e}")))
}

/// Generated synthetic composed-retrieval dataset.
#[pyclass(module = "mcalab", frozen)]
struct Dataset {
    inner: DatasetBundle,
}

impl Dataset {
    fn split(&self, name: &str) -> PyResult<&EvalSplit> {
        match name {
            "ind" => Ok(&self.inner.ind_test),
            "ood" => Ok(&self.inner.ood_test),
            other => Err(PyValueError::new_err(format!("unknown split '{other}'; expected 'ind' or 'ood'"))),
        }
    }
}

#[pymethods]
impl Dataset {
    /// Generates a dataset from a generator config dict (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: GeneratorConfig = from_py(config)?;
        Ok(Self {
            inner: data::generate(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::deserialize(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::serialize(&self.inner, &path).map_err(py_err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Image-only and latent oracle accuracies on both test splits.
    fn oracles<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let out = PyDict::new(py);
        out.set_item("image_only", to_py(py, &data::oracle_image_only(&self.inner).map_err(py_err)?)?)?;
        out.set_item("latent", to_py(py, &data::oracle_latent(&self.inner).map_err(py_err)?)?)?;
        Ok(out)
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn composed_fraction(&self) -> f64 {
        self.inner.composed_fraction()
    }

    fn __len__(&self) -> usize {
        self.inner.train.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_train={}, n_ind={}, n_ood={})",
            self.inner.train.len(),
            self.inner.ind_test.queries.len(),
            self.inner.ood_test.queries.len()
        )
    }
}

/// Trained (or freshly initialised) encoder weights.
#[pyclass(module = "mcalab", frozen)]
struct Encoder {
    inner: EncoderParams,
    step: u64,
}

#[pymethods]
impl Encoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, step) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner, step })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, self.step, &path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Retrieval report for the `"ind"` or `"ood"` split.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let split = dataset.split(split)?;
        let report = py.detach(|| evaluate(&self.inner, split)).map_err(py_err)?;
        to_py(py, &report)
    }

    /// Embeddings of every query and pool item of a split, with group ids
    /// and optional 2-D PCA coordinates.
    #[pyo3(signature = (dataset, split, pca=false))]
    fn embed<'py>(&self, py: Python<'py>, dataset: &Dataset, split: &str, pca: bool) -> PyResult<Bound<'py, PyDict>> {
        let dump = embed_groups(&self.inner, dataset.split(split)?).map_err(py_err)?;
        let out = PyDict::new(py);
        if pca {
            out.set_item("pca", pca_project(&dump.embeddings, 2).map_err(py_err)?)?;
        }
        out.set_item("embeddings", dump.embeddings)?;
        out.set_item("groups", dump.groups)?;
        out.set_item("query_index", dump.query_index)?;
        Ok(out)
    }
}

/// Trains an encoder on `dataset`. Returns `(encoder, step_log, probes)`.
/// When `out_dir` is given the usual log and checkpoint files are written.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, out_dir=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config: Option<&Bound<'py, PyAny>>,
    out_dir: Option<PathBuf>,
) -> PyResult<(Encoder, Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let mut cfg: TrainConfig = from_py(config)?;
    cfg.fit_encoder_to(&dataset.inner);
    cfg.validate().map_err(py_err)?;
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", dir.display())))?;
    }
    let paths = out_dir.as_deref().map(TrainPaths::in_dir);
    let out = py
        .detach(|| run_training(&dataset.inner, &cfg, paths.as_ref()))
        .map_err(py_err)?;
    let encoder = Encoder {
        inner: out.params,
        step: cfg.steps as u64,
    };
    Ok((encoder, to_py(py, &out.log)?, to_py(py, &out.probes)?))
}

/// Complete default configuration with `data`, `train` and `experiment` sections.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &LabConfig::default())
}

/// In-batch contrastive loss over unit vectors.
#[pyfunction]
#[pyo3(signature = (queries, docs, positives, tau=0.02, symmetric=false))]
fn cl_loss(queries: Vec<Vec<f64>>, docs: Vec<Vec<f64>>, positives: Vec<usize>, tau: f64, symmetric: bool) -> PyResult<f64> {
    objectives::cl_loss(&queries, &docs, &positives, tau, symmetric).map_err(py_err)
}

/// Composition preference loss for one composed embedding.
#[pyfunction]
#[pyo3(signature = (composed, parts, target, tau=0.02))]
fn mcp_loss(composed: Vec<f64>, parts: Vec<Vec<f64>>, target: Vec<f64>, tau: f64) -> PyResult<f64> {
    objectives::mcp_loss(&composed, &parts, &target, tau).map_err(py_err)
}

/// Composition regularization loss against mixed prototypes.
#[pyfunction]
#[pyo3(signature = (composed, prototypes, tau=0.02))]
fn mcr_loss(composed: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    objectives::mcr_loss(&composed, &prototypes, tau).map_err(py_err)
}

/// Finite-difference gradient checks; returns one dict per case.
#[pyfunction]
#[pyo3(signature = (n_seeds=3))]
fn gradient_suite(py: Python<'_>, n_seeds: u64) -> PyResult<Bound<'_, PyAny>> {
    let cases = py.detach(|| objectives::gradient_suite(n_seeds)).map_err(py_err)?;
    to_py(py, &cases)
}

#[pymodule]
fn mcalab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(cl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mcp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mcr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add("GRAD_TOLERANCE", objectives::GRAD_TOLERANCE)?;
    Ok(())
}
