//! Python bindings: synthetic datasets, training runs, networks and probes.
//!
//! Specs and configs cross the boundary as JSON strings with the same
//! schema the command-line tool uses.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use jlu::autodiff::Matrix;
use jlu::datagen::{self, LabeledDataset, Split, SyntheticSpec};
use jlu::eval::MetricsRecord;
use jlu::model::{ModelConfig, NetworkBundle};
use jlu::trainer;

fn to_py(e: jlu::Error) -> PyErr {
    match e {
        jlu::Error::Config(_) | jlu::Error::Data(_) | jlu::Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!(
            "split must be 'train' or 'test', got '{other}'"
        ))),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Matrix::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Features with a primary task and any number of spurious tasks.
#[pyclass(name = "Dataset", module = "pyjlu", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(LabeledDataset);

#[pymethods]
impl PyDataset {
    /// Samples `n` points from a synthetic spec (JSON) under a split's joint.
    #[staticmethod]
    #[pyo3(signature = (spec_json, n, split = "train", seed = 0))]
    fn sample(spec_json: &str, n: usize, split: &str, seed: u64) -> PyResult<Self> {
        let spec: SyntheticSpec = from_json("spec", spec_json)?;
        datagen::sample_dataset(&spec, n, parse_split(split)?, seed)
            .map(Self)
            .map_err(to_py)
    }

    /// Test set with exactly equal counts in every label cell.
    #[staticmethod]
    #[pyo3(signature = (spec_json, n, seed = 0))]
    fn balanced_test(spec_json: &str, n: usize, seed: u64) -> PyResult<Self> {
        let spec: SyntheticSpec = from_json("spec", spec_json)?;
        datagen::balanced_test(&spec, n, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        datagen::import_dataset(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        datagen::export_dataset(&self.0, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn primary_task(&self) -> String {
        self.0.primary.name.clone()
    }

    #[getter]
    fn spurious_tasks(&self) -> Vec<String> {
        self.0.spurious_names()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.0.x)
    }

    fn labels(&self, task: &str) -> PyResult<Vec<usize>> {
        self.0
            .task(task)
            .map(|t| t.labels.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no task '{task}'")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, input_dim={}, primary='{}', spurious={:?})",
            self.0.len(),
            self.0.input_dim(),
            self.0.primary.name,
            self.0.spurious_names()
        )
    }
}

/// Training hyperparameters. Unset fields take their defaults.
#[pyclass(name = "TrainConfig", module = "pyjlu", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(trainer::TrainConfig);

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (*, alpha = None, base_lr = None, head_lr_boost = None, epochs = None, batch_size = None, seed = None))]
    fn new(
        alpha: Option<f64>,
        base_lr: Option<f64>,
        head_lr_boost: Option<f64>,
        epochs: Option<usize>,
        batch_size: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut c = trainer::TrainConfig::default();
        c.alpha = alpha.unwrap_or(c.alpha);
        c.base_lr = base_lr.unwrap_or(c.base_lr);
        c.head_lr_boost = head_lr_boost.unwrap_or(c.head_lr_boost);
        c.epochs = epochs.unwrap_or(c.epochs);
        c.batch_size = batch_size.unwrap_or(c.batch_size);
        c.seed = seed.unwrap_or(c.seed);
        c.validate().map_err(to_py)?;
        Ok(Self(c))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let c: trainer::TrainConfig = from_json("train config", text)?;
        c.validate().map_err(to_py)?;
        Ok(Self(c))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("config serializes")
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.0.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.to_json())
    }
}

/// A trained feature extractor with its primary and secondary heads.
#[pyclass(name = "Network", module = "pyjlu")]
struct PyNetwork(NetworkBundle);

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        jlu::checkpoint::load_bundle(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        jlu::checkpoint::save_bundle(&self.0, path).map_err(to_py)
    }

    /// Embeddings for a dataset or a list of feature rows.
    fn embed(&self, data: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f64>>> {
        let x = match data.extract::<PyRef<'_, PyDataset>>() {
            Ok(ds) => ds.0.x.clone(),
            Err(_) => matrix_from_rows(data.extract()?)?,
        };
        self.0.embed(&x).map(|e| matrix_to_rows(&e)).map_err(to_py)
    }

    /// Primary-head class predictions for a dataset.
    fn predict(&self, data: PyRef<'_, PyDataset>) -> PyResult<Vec<usize>> {
        let e = self.0.embed(&data.0.x).map_err(to_py)?;
        self.0.primary_head.predict(&e).map_err(to_py)
    }

    /// Metrics on a labelled dataset, with a fresh probe per spurious task.
    #[pyo3(signature = (data, probe_seed = 0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: PyRef<'_, PyDataset>,
        probe_seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = trainer::evaluate(&self.0, &data.0, 0, (0.0, 0.0), probe_seed).map_err(to_py)?;
        record_dict(py, &r)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.0.embedding_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn secondary_tasks(&self) -> Vec<String> {
        self.0.secondary_heads.iter().map(|h| h.name.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input_dim={}, embedding_dim={}, secondary={:?})",
            self.0.input_dim(),
            self.0.embedding_dim(),
            self.secondary_tasks()
        )
    }
}

fn record_dict<'py>(py: Python<'py>, r: &MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("primary_accuracy", r.primary_accuracy)?;
    d.set_item("primary_adjacent_accuracy", r.primary_adjacent_accuracy)?;
    d.set_item("loss_primary", r.loss_primary)?;
    d.set_item("loss_confusion", r.loss_confusion)?;
    d.set_item("mean_kl", r.mean_kl())?;
    let tasks = PyList::empty(py);
    for t in &r.tasks {
        let td = PyDict::new(py);
        td.set_item("name", &t.name)?;
        td.set_item("classes", t.classes)?;
        td.set_item("probe_accuracy", t.probe_accuracy)?;
        td.set_item("rescaled_score", t.rescaled_score)?;
        td.set_item("percent_unlearned", t.percent_unlearned)?;
        tasks.append(td)?;
    }
    d.set_item("tasks", tasks)?;
    Ok(d)
}

fn history_list<'py>(py: Python<'py>, h: &[MetricsRecord]) -> PyResult<Bound<'py, PyList>> {
    let out = PyList::empty(py);
    for r in h {
        out.append(record_dict(py, r)?)?;
    }
    Ok(out)
}

fn model_config(hidden: Option<Vec<usize>>, embedding_dim: Option<usize>) -> ModelConfig {
    let d = ModelConfig::default();
    ModelConfig {
        hidden: hidden.unwrap_or(d.hidden),
        embedding_dim: embedding_dim.unwrap_or(d.embedding_dim),
        ..d
    }
}

/// Trains on the primary task only. Returns `(network, history)`.
#[pyfunction]
#[pyo3(signature = (config, train, eval, *, hidden = None, embedding_dim = None))]
fn run_baseline<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    train: &PyDataset,
    eval: &PyDataset,
    hidden: Option<Vec<usize>>,
    embedding_dim: Option<usize>,
) -> PyResult<(PyNetwork, Bound<'py, PyList>)> {
    let model = model_config(hidden, embedding_dim);
    let (bundle, history) = py
        .detach(|| trainer::run_baseline(&config.0, &model, &train.0, &eval.0))
        .map_err(to_py)?;
    Ok((PyNetwork(bundle), history_list(py, &history)?))
}

/// Joint learning and unlearning of `tasks`, whose labels come from
/// `secondary` (default: every spurious task it carries).
#[pyfunction]
#[pyo3(signature = (config, train, secondary, eval, *, tasks = None, hidden = None, embedding_dim = None))]
#[allow(clippy::too_many_arguments)]
fn run_jlu<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    train: &PyDataset,
    secondary: &PyDataset,
    eval: &PyDataset,
    tasks: Option<Vec<String>>,
    hidden: Option<Vec<usize>>,
    embedding_dim: Option<usize>,
) -> PyResult<(PyNetwork, Bound<'py, PyList>)> {
    let names = tasks.unwrap_or_else(|| secondary.0.spurious_names());
    let sec = names
        .iter()
        .map(|n| secondary.0.task_dataset(n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let model = model_config(hidden, embedding_dim);
    let (bundle, history) = py
        .detach(|| trainer::run_jlu(&config.0, &model, &train.0, &sec, &eval.0))
        .map_err(to_py)?;
    Ok((PyNetwork(bundle), history_list(py, &history)?))
}

/// Held-out accuracy of a fresh linear probe on fixed embeddings.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, classes, seed = 0))]
fn probe_accuracy(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    seed: u64,
) -> PyResult<f64> {
    let x = matrix_from_rows(embeddings)?;
    trainer::probe_train(&x, &labels, classes, seed).map_err(to_py)
}

/// Accuracy of the optimal classifier for `task` under a split's joint.
#[pyfunction]
#[pyo3(signature = (spec_json, task, split = "test"))]
fn bayes_oracle_accuracy(spec_json: &str, task: &str, split: &str) -> PyResult<f64> {
    let spec: SyntheticSpec = from_json("spec", spec_json)?;
    datagen::bayes_oracle_accuracy(&spec, task, parse_split(split)?).map_err(to_py)
}

#[pymodule]
pub fn pyjlu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(run_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(run_jlu, m)?)?;
    m.add_function(wrap_pyfunction!(probe_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_oracle_accuracy, m)?)?;
    Ok(())
}
