//! Python bindings: run configuration, the small distilled model, clean/noisy
//! selection, k-medoids condensation, dataset IO and the end-to-end simulated
//! loop.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use freeal_core::data::{LabelSpace, RunConfig, Split};
use freeal_core::demo_pool::{k_medoids as k_medoids_rs, medoid_cost as medoid_cost_rs};
use freeal_core::io;
use freeal_core::orchestrator::{run_loop, LoopOptions, RoundRecord};
use freeal_core::selection::{fit_gmm_1d, partition};
use freeal_core::selftrain::{robust_train_round, GaussianJitterProvider, LabeledItem, UnlabeledItem};
use freeal_core::sim::{gaussian_fixture, mock_backend};
use freeal_core::slm::SmallModel;
use freeal_core::EngineError;

fn to_py_err(err: EngineError) -> PyErr {
    match err {
        EngineError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Run configuration; attribute names match the engine's key=value config
/// file format.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, overridable by keyword arguments (same keys as the config
    /// file, e.g. RunConfig(seed=3, total_epochs=40)).
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut lines = String::new();
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                let value = value.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    "None" => "none".to_string(),
                    other => other.to_string(),
                };
                lines.push_str(&format!("{key} = {value}\n"));
            }
        }
        let inner = io::parse_config(&lines).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn total_epochs(&self) -> usize {
        self.inner.total_epochs
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn r_percent(&self) -> f64 {
        self.inner.r_percent
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, num_loops={}, total_epochs={}, tau={}, r_percent={})",
            self.inner.seed,
            self.inner.num_loops,
            self.inner.total_epochs,
            self.inner.tau,
            self.inner.r_percent
        )
    }
}

/// The small distilled model: one hidden relu layer and a softmax head.
#[pyclass(name = "SmallModel", from_py_object)]
#[derive(Clone)]
struct PySmallModel {
    inner: SmallModel,
}

#[pymethods]
impl PySmallModel {
    #[new]
    fn new(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            inner: SmallModel::new(input_dim, hidden_dim, num_classes, seed),
        }
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(&x).map_err(to_py_err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&x).map_err(to_py_err)
    }

    fn hidden_repr(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.hidden_repr(&x).map_err(to_py_err)
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Little-endian binary checkpoint with a text header.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_model(&path, &self.inner).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_model(&path).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "SmallModel(input_dim={}, hidden_dim={}, num_classes={})",
            self.inner.d_in, self.inner.d_h, self.inner.num_classes
        )
    }
}

/// Fit the two-component loss GMM and threshold the clean posterior.
/// Returns {"means", "variances", "weights", "clean", "noisy"}.
#[pyfunction]
#[pyo3(signature = (losses, tau=0.7))]
fn select_clean<'py>(
    py: Python<'py>,
    losses: Vec<f64>,
    tau: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let fit = fit_gmm_1d(&losses, 200, 1e-8).map_err(to_py_err)?;
    let split = partition(&fit, tau);
    let out = PyDict::new(py);
    out.set_item("means", fit.means.to_vec())?;
    out.set_item("variances", fit.variances.to_vec())?;
    out.set_item("weights", fit.weights.to_vec())?;
    out.set_item("clean", split.clean)?;
    out.set_item("noisy", split.noisy)?;
    Ok(out)
}

/// Deterministic k-medoids over (id, vector) pairs; returns the medoid ids.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0))]
fn k_medoids(points: Vec<(String, Vec<f64>)>, k: usize, seed: u64) -> PyResult<Vec<String>> {
    k_medoids_rs(&points, k, 100, seed).map_err(to_py_err)
}

/// Total within-cluster cost of a medoid set.
#[pyfunction]
fn medoid_cost(points: Vec<(String, Vec<f64>)>, medoid_ids: Vec<String>) -> f64 {
    medoid_cost_rs(&points, &medoid_ids)
}

/// One robust distillation round on explicit data: labeled is a list of
/// (id, embedding, label); returns (model, clean_ids, noisy_ids).
#[pyfunction]
#[pyo3(signature = (labeled, config, unlabeled=None))]
fn distill(
    labeled: Vec<(String, Vec<f64>, usize)>,
    config: &PyRunConfig,
    unlabeled: Option<Vec<(String, Vec<f64>)>>,
) -> PyResult<(PySmallModel, Vec<String>, Vec<String>)> {
    if labeled.is_empty() {
        return Err(PyValueError::new_err("no labeled samples"));
    }
    let cfg = &config.inner;
    let input_dim = labeled[0].1.len();
    let num_classes = labeled.iter().map(|(_, _, l)| l + 1).max().unwrap().max(2);
    let items: Vec<LabeledItem> = labeled
        .into_iter()
        .map(|(id, x, label)| LabeledItem { id, x, label })
        .collect();
    let extra: Vec<UnlabeledItem> = unlabeled
        .unwrap_or_default()
        .into_iter()
        .map(|(id, x)| UnlabeledItem { id, x })
        .collect();
    let mut model = SmallModel::new(input_dim, cfg.hidden_dim, num_classes, cfg.seed);
    let provider = GaussianJitterProvider {
        sigma: cfg.augment_sigma,
        seed: cfg.seed,
    };
    let outcome =
        robust_train_round(&mut model, &items, &extra, cfg, &provider, cfg.seed).map_err(to_py_err)?;
    let clean = outcome.split.clean.iter().map(|&i| items[i].id.clone()).collect();
    let noisy = outcome.split.noisy.iter().map(|&i| items[i].id.clone()).collect();
    Ok((PySmallModel { inner: model }, clean, noisy))
}

fn record_to_dict<'py>(py: Python<'py>, r: &RoundRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item(
        "kind",
        match r.kind {
            freeal_core::orchestrator::RoundKind::LlmAnnotation => "llm_annotation",
            freeal_core::orchestrator::RoundKind::SlmDistillation => "slm_distillation",
        },
    )?;
    d.set_item("labeled", r.labeled)?;
    d.set_item("ambiguous", r.ambiguous)?;
    d.set_item("clean", r.clean)?;
    d.set_item("noisy", r.noisy)?;
    d.set_item("annotator_calls", r.annotator_calls)?;
    d.set_item("changed_fraction", r.changed_fraction)?;
    d.set_item("transductive_accuracy", r.transductive_accuracy)?;
    d.set_item("test_accuracy", r.test_accuracy)?;
    Ok(d)
}

/// End-to-end loop on synthetic blob data with the offline annotator.
/// Returns a list of per-round record dicts.
#[pyfunction]
#[pyo3(signature = (seed=0, noise=0.3, n_train=200, n_test=80, config=None, out_dir=None))]
fn simulate<'py>(
    py: Python<'py>,
    seed: u64,
    noise: f64,
    n_train: usize,
    n_test: usize,
    config: Option<PyRunConfig>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyList>> {
    let fixture = gaussian_fixture(n_train, n_test, seed);
    let backend = mock_backend(&fixture, noise, 0.0, seed).map_err(to_py_err)?;
    let mut cfg = config.map(|c| c.inner).unwrap_or_else(|| {
        let mut cfg = RunConfig::default();
        cfg.hidden_dim = 32;
        cfg.batch_size = 8;
        cfg.total_epochs = 60;
        cfg
    });
    cfg.seed = seed;
    let outcome = run_loop(
        &fixture.train,
        &LoopOptions {
            backend: &backend,
            config: &cfg,
            out_dir: out_dir.as_deref(),
            resume: false,
            resume_round: None,
            stop_after: None,
            gold: Some(&fixture.gold),
            test: Some(&fixture.test),
        },
    )
    .map_err(to_py_err)?;
    let records = PyList::empty(py);
    for r in &outcome.state.records {
        records.append(record_to_dict(py, r)?)?;
    }
    Ok(records)
}

/// Load a JSONL dataset: returns (samples, gold) where samples is a list of
/// {"id", "text", "embedding", "pseudo_label", "ambiguous"} dicts and gold a
/// {id: class} dict for records that carried a gold label.
#[pyfunction]
fn load_jsonl<'py>(
    py: Python<'py>,
    path: PathBuf,
) -> PyResult<(Bound<'py, PyList>, Bound<'py, PyDict>)> {
    let space = LabelSpace::binary_sentiment();
    let (dataset, _) = io::load_jsonl_dataset(&path, &space, Split::Train).map_err(to_py_err)?;
    let truth: BTreeMap<String, usize> = io::load_text_truth(&path, &space).unwrap_or_default();
    let samples = PyList::empty(py);
    let gold = PyDict::new(py);
    for s in &dataset.samples {
        let d = PyDict::new(py);
        d.set_item("id", &s.id)?;
        d.set_item("text", &s.text)?;
        d.set_item("embedding", &s.embedding)?;
        d.set_item("pseudo_label", s.pseudo_label)?;
        d.set_item("ambiguous", s.ambiguous)?;
        samples.append(d)?;
        if let Some(class) = truth.get(&s.text) {
            gold.set_item(&s.id, class)?;
        }
    }
    Ok((samples, gold))
}

#[pymodule]
fn freeal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySmallModel>()?;
    m.add_function(wrap_pyfunction!(select_clean, m)?)?;
    m.add_function(wrap_pyfunction!(k_medoids, m)?)?;
    m.add_function(wrap_pyfunction!(medoid_cost, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(load_jsonl, m)?)?;
    Ok(())
}
