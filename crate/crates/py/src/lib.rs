//! Python bindings. Vectors cross the boundary as lists of floats, matrices
//! as lists of rows, and structured results as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use calm_core::anchors::{self, AnchorSet, Temperature, TextFeatures, VideoFeatures, DEFAULT_TEMPLATE};
use calm_core::checkpoint::load_checkpoint;
use calm_core::config::RunConfig;
use calm_core::corpus::{Corpus, Split};
use calm_core::cvae;
use calm_core::model::CalmHead;
use calm_core::retrieval::{self, RetrievalMetrics, SimilarityMatrix};
use calm_core::store;
use calm_core::synth::{self, SyntheticConfig};
use calm_core::trainer;
use calm_core::{CalmError, ParamStore, Tensor};

fn py_err(e: CalmError) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 | 4 => PyValueError::new_err(msg),
        3 => PyIOError::new_err(msg),
        _ if matches!(e, CalmError::Dimension { .. } | CalmError::Contract(_) | CalmError::EmptyInput(_)) => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for calm_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix needs at least one row"));
    }
    Tensor::from_rows(rows).py()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<PyObject> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (value.to_string(),))?.unbind())
}

fn anchor_set(anchors: &[Vec<f64>]) -> PyResult<AnchorSet> {
    let labels = (0..anchors.len()).map(|i| format!("anchor {i}")).collect();
    AnchorSet::new(matrix(anchors)?, labels, DEFAULT_TEMPLATE).py()
}

/// Caption distribution `softmax(tau * cos(feature, anchors))`.
#[pyfunction]
#[pyo3(signature = (feature, anchors, tau = 5.0))]
fn text_distribution(feature: Vec<f64>, anchors: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<f64>> {
    let t = Temperature::fixed(tau).py()?;
    let text = TextFeatures::new(feature).py()?;
    Ok(anchors::text_anchor_distribution(&text, &anchor_set(&anchors)?, &t)
        .py()?
        .probs()
        .to_vec())
}

/// Video distribution; frames are mean-pooled first.
#[pyfunction]
#[pyo3(signature = (frames, anchors, tau = 5.0))]
fn video_distribution(frames: Vec<Vec<f64>>, anchors: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<f64>> {
    let t = Temperature::fixed(tau).py()?;
    let video = VideoFeatures::new(matrix(&frames)?).py()?;
    Ok(anchors::video_anchor_distribution(&video, &anchor_set(&anchors)?, &t)
        .py()?
        .probs()
        .to_vec())
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> f64 {
    anchors::entropy(&p)
}

/// Cross-entropy of a reconstruction against a target distribution.
#[pyfunction]
fn rec_loss(target: Vec<f64>, recon: Vec<f64>) -> PyResult<f64> {
    cvae::rec_loss_probs(&target, &recon).py()
}

/// KL divergence of a diagonal Gaussian from the standard normal.
#[pyfunction]
fn kl_loss(mu: Vec<f64>, logvar: Vec<f64>) -> PyResult<f64> {
    cvae::kl_loss(&mu, &logvar).py()
}

/// 1-based rank of the ground-truth column for each query row. Ties count
/// in the query's favour.
#[pyfunction]
#[pyo3(signature = (scores, ground_truth = None))]
fn ranks(scores: Vec<Vec<f64>>, ground_truth: Option<Vec<usize>>) -> PyResult<Vec<usize>> {
    let s = matrix(&scores)?;
    let sim = match ground_truth {
        Some(gt) => SimilarityMatrix::new(s, gt),
        None => SimilarityMatrix::diagonal(s),
    }
    .py()?;
    Ok(retrieval::rank_of_truth(&sim))
}

#[pyfunction]
fn recall_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    retrieval::recall_at_k(&ranks, k).py()
}

/// R@1, R@5, R@10 and mean rank of a score matrix.
#[pyfunction]
#[pyo3(signature = (scores, ground_truth = None))]
fn retrieval_metrics(py: Python<'_>, scores: Vec<Vec<f64>>, ground_truth: Option<Vec<usize>>) -> PyResult<PyObject> {
    let r = ranks(scores, ground_truth)?;
    metrics_dict(py, &RetrievalMetrics::from_ranks(&r).py()?)
}

fn metrics_dict(py: Python<'_>, m: &RetrievalMetrics) -> PyResult<PyObject> {
    let d = PyDict::new(py);
    d.set_item("r1", m.r1)?;
    d.set_item("r5", m.r5)?;
    d.set_item("r10", m.r10)?;
    d.set_item("mnr", m.mnr)?;
    d.set_item("n_queries", m.n_queries)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn top_k(probs: Vec<f64>, labels: Vec<String>, k: usize) -> PyResult<Vec<(String, f64)>> {
    retrieval::top_k(&probs, &labels, k).py()
}

/// Writes rows as an f32 embedding store.
#[pyfunction]
fn write_store(path: PathBuf, rows: Vec<Vec<f64>>) -> PyResult<()> {
    store::write_store(&path, &matrix(&rows)?).py()
}

#[pyfunction]
fn read_store(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows_of(&store::read_store(&path).py()?))
}

/// Generates a synthetic corpus into `out_dir` and returns file checksums.
/// `config` is a JSON object of synthetic-generator overrides.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, config = None))]
fn generate_synthetic(out_dir: PathBuf, seed: u64, config: Option<&str>) -> PyResult<Vec<(String, String)>> {
    let cfg: SyntheticConfig = match config {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("synthetic config: {e}")))?,
        None => SyntheticConfig::default(),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(synth::generate_synthetic(&cfg, seed, &out_dir).py()?.checksums)
}

/// Trains from a config file and returns a summary dict.
#[pyfunction]
fn train(py: Python<'_>, config_path: PathBuf) -> PyResult<PyObject> {
    let mut cfg = RunConfig::load(&config_path).py()?;
    let notes: Vec<String> = cfg.apply_env_seed().py()?.into_iter().collect();
    let corpus = trainer::prepare_corpus(&cfg).py()?;
    let out = py
        .allow_threads(|| trainer::train(&cfg, &corpus, Some(&cfg.output_dir), &notes))
        .py()?;
    let summary = serde_json::json!({
        "output_dir": cfg.output_dir,
        "steps": out.steps,
        "epochs": out.epochs,
        "initial_loss": out.initial_loss,
        "final_loss": out.final_loss,
        "loss_trace": out.loss_trace,
        "best": out.best,
    });
    json_to_py(py, &summary)
}

/// A trained head restored from a checkpoint.
#[pyclass(name = "Head", module = "calm")]
struct PyHead {
    head: CalmHead,
    store: ParamStore,
    config: RunConfig,
    step: usize,
    checksum: String,
}

#[pymethods]
impl PyHead {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).py()?;
        let (store, head) = ckpt.restore().py()?;
        Ok(Self {
            head,
            store,
            config: ckpt.meta.config,
            step: ckpt.meta.step,
            checksum: ckpt.meta.data_checksum,
        })
    }

    #[getter]
    fn step(&self) -> usize {
        self.step
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.head.labels.clone()
    }

    #[getter]
    fn data_checksum(&self) -> &str {
        &self.checksum
    }

    fn parameter_names(&self) -> Vec<String> {
        self.store.iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Text-to-video metrics on one split of the corpus at `manifest`.
    #[pyo3(signature = (manifest, split = "test"))]
    fn evaluate(&self, py: Python<'_>, manifest: PathBuf, split: &str) -> PyResult<PyObject> {
        let split: Split = split.parse().py()?;
        let corpus = Corpus::load(&manifest, self.config.data.anchors.as_deref()).py()?;
        let m = trainer::evaluate(&self.head, &self.store, &corpus, split).py()?;
        metrics_dict(py, &m)
    }

    fn __repr__(&self) -> String {
        format!(
            "Head(step={}, anchors={}, params={})",
            self.step,
            self.head.labels.len(),
            self.store.len()
        )
    }
}

#[pymodule]
fn calm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(text_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(video_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(rec_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ranks, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(write_store, m)?)?;
    m.add_function(wrap_pyfunction!(read_store, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyHead>()?;
    Ok(())
}
