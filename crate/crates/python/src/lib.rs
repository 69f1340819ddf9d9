//! Python bindings for the ppsr reranking engine.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ppsr_core::backend::{Backend, MockBackend as CoreMock};
use ppsr_core::config::{validate_config, PipelineConfig};
use ppsr_core::domain::{
    DecisionLogits, Product, PurchaseEvent, RankSource, RankedEntry, RankedList, SearchLog,
};
use ppsr_core::error::Error;
use ppsr_core::eval::{self, MetricReport, MetricSpec};
use ppsr_core::pipeline::{self, PipelineSpec};
use ppsr_core::prompt::RenderedPrompt;
use ppsr_core::select::{self, EmbeddingStore};
use ppsr_core::{ingest, rerank, summarize};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Backend(_) | Error::Step { .. } | Error::StaleArtifact { .. } => {
            PyRuntimeError::new_err(format!("{e:#}"))
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn ranked_list(ids: Vec<String>) -> PyResult<RankedList> {
    let n = ids.len();
    let entries = ids
        .into_iter()
        .enumerate()
        .map(|(i, product_id)| RankedEntry {
            product_id,
            score: (n - i) as f64,
        })
        .collect();
    RankedList::from_ordered(entries, RankSource::Reranker).map_err(py_err)
}

/// Pipeline configuration. Keyword arguments override the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

fn set_field(
    cfg: &PipelineConfig,
    key: &str,
    value: &Bound<'_, PyAny>,
) -> PyResult<PipelineConfig> {
    let mut json = serde_json::to_value(cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let slot = json
        .get_mut(key)
        .ok_or_else(|| PyKeyError::new_err(format!("unknown config field {key}")))?;
    *slot = match slot {
        serde_json::Value::Bool(_) => value.extract::<bool>()?.into(),
        serde_json::Value::Number(n) if n.is_u64() => value.extract::<u64>()?.into(),
        serde_json::Value::Number(_) => value.extract::<f64>()?.into(),
        _ => return Err(PyTypeError::new_err(format!("field {key} cannot be set"))),
    };
    serde_json::from_value(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = PipelineConfig::default();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                inner = set_field(&inner, &k.extract::<String>()?, &v)?;
            }
        }
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    /// Problems with the current values; empty when valid.
    fn validate(&self) -> Vec<String> {
        validate_config(&self.inner)
    }

    fn __getattr__(&self, key: &str, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let json = serde_json::to_value(&self.inner).expect("config serializes");
        let v = json
            .get(key)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown config field {key}")))?;
        Ok(match v {
            serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
            serde_json::Value::Number(n) if n.is_u64() => {
                n.as_u64().unwrap().into_pyobject(py)?.into_any().unbind()
            }
            serde_json::Value::Number(n) => {
                n.as_f64().unwrap().into_pyobject(py)?.into_any().unbind()
            }
            other => other.to_string().into_pyobject(py)?.into_any().unbind(),
        })
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.to_json())
    }
}

/// Deterministic offline backend.
#[pyclass(name = "MockBackend")]
struct PyMockBackend {
    inner: CoreMock,
}

fn prompt(text: &str, image_refs: Vec<String>) -> RenderedPrompt {
    RenderedPrompt {
        text: text.to_string(),
        image_refs,
    }
}

#[pymethods]
impl PyMockBackend {
    #[new]
    #[pyo3(signature = (seed = 42, embedding_dim = 64))]
    fn new(seed: u64, embedding_dim: usize) -> Self {
        PyMockBackend {
            inner: CoreMock::new(seed, embedding_dim),
        }
    }

    /// (yes, no) decision logits for a prompt.
    #[pyo3(signature = (text, image_refs = Vec::new()))]
    fn score(&self, text: &str, image_refs: Vec<String>) -> PyResult<(f64, f64)> {
        let l = self
            .inner
            .score_decision(&prompt(text, image_refs))
            .map_err(py_err)?;
        Ok((l.yes, l.no))
    }

    #[pyo3(signature = (text, image_ref = None))]
    fn embed(&self, text: &str, image_ref: Option<&str>) -> PyResult<Vec<f64>> {
        Ok(self.inner.embed(text, image_ref).map_err(py_err)?.values)
    }

    #[pyo3(signature = (text, max_chars, image_refs = Vec::new()))]
    fn generate(&self, text: &str, max_chars: usize, image_refs: Vec<String>) -> PyResult<String> {
        self.inner
            .generate(&prompt(text, image_refs), max_chars)
            .map_err(py_err)
    }
}

/// Probability of "yes" from the two decision logits.
#[pyfunction]
fn purchase_probability(yes: f64, no: f64) -> PyResult<f64> {
    rerank::purchase_probability(DecisionLogits { yes, no }).map_err(py_err)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    select::cosine_slices(&a, &b).map_err(py_err)
}

#[pyfunction]
fn mrr_at_k(ranking: Vec<String>, target: &str, k: usize) -> PyResult<f64> {
    Ok(eval::mrr_at_k(&ranked_list(ranking)?, target, k))
}

#[pyfunction]
fn ndcg_at_k(ranking: Vec<String>, target: &str, k: usize) -> PyResult<f64> {
    Ok(eval::ndcg_at_k(&ranked_list(ranking)?, target, k))
}

#[pyfunction]
fn recall_at_k(ranking: Vec<String>, target: &str, k: usize) -> PyResult<f64> {
    Ok(eval::recall_at_k(&ranked_list(ranking)?, target, k))
}

/// Mean metrics over logs. `runs` maps log id to a ranked id list and
/// `targets` maps log id to its purchased product; logs without a run score 0.
#[pyfunction]
#[pyo3(signature = (runs, targets, metrics = eval::DEFAULT_METRICS))]
fn evaluate(
    runs: HashMap<String, Vec<String>>,
    targets: BTreeMap<String, String>,
    metrics: &str,
) -> PyResult<BTreeMap<String, f64>> {
    let spec: MetricSpec = metrics.parse().map_err(py_err)?;
    let runs = runs
        .into_iter()
        .map(|(id, r)| Ok((id, ranked_list(r)?)))
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    let logs: Vec<SearchLog> = targets
        .into_iter()
        .map(|(log_id, target_product_id)| SearchLog {
            log_id,
            user_id: "u".into(),
            query_id: "q".into(),
            target_product_id,
            timestamp: 0,
        })
        .collect();
    Ok(eval::evaluate(&runs, &logs, &spec).map_err(py_err)?.metrics)
}

/// Percentage change over a baseline, rounded to two decimals.
#[pyfunction]
fn relative_improvement(new: f64, base: f64) -> PyResult<f64> {
    let report = |v: f64| MetricReport {
        metric_order: vec!["m".into()],
        metrics: BTreeMap::from([("m".to_string(), v)]),
        log_count: 1,
        missing_count: 0,
        rel_impr: None,
    };
    Ok(eval::relative_improvement(&report(new), &report(base)).map_err(py_err)?["m"])
}

/// History selection for one candidate. `history` is a chronological list of
/// (product_id, timestamp); `product_vecs` maps product ids to embeddings.
#[pyfunction]
#[pyo3(signature = (history, query_vec, candidate_vec, product_vecs, k, candidate_id = "", exclude_candidate = false))]
fn select_history(
    history: Vec<(String, i64)>,
    query_vec: Vec<f64>,
    candidate_vec: Vec<f64>,
    product_vecs: HashMap<String, Vec<f64>>,
    k: usize,
    candidate_id: &str,
    exclude_candidate: bool,
) -> PyResult<Vec<String>> {
    let mut store = EmbeddingStore::new("python", "python", query_vec.len());
    for (id, values) in product_vecs {
        let v =
            ppsr_core::domain::EmbeddingVector::new(values, "python", "python").map_err(py_err)?;
        store.insert(select::product_key(&id), v).map_err(py_err)?;
    }
    let history: Vec<PurchaseEvent> = history
        .into_iter()
        .map(|(product_id, timestamp)| PurchaseEvent {
            product_id,
            timestamp,
        })
        .collect();
    select::select_history_vectors(
        &history,
        &query_vec,
        &candidate_vec,
        candidate_id,
        &store,
        k,
        exclude_candidate,
    )
    .map_err(py_err)
}

/// Query derived from a category path, as (query_id, text).
#[pyfunction]
fn extract_query(category: Vec<String>) -> PyResult<(String, String)> {
    let product = Product {
        product_id: "python".into(),
        title: String::new(),
        brand: String::new(),
        category,
        description: String::new(),
        summary: None,
        image_ref: None,
    };
    let q = ingest::extract_query(&product).map_err(py_err)?;
    Ok((q.query_id, q.text))
}

/// Top `k_d` perspectives by frequency, with the full frequency table.
#[pyfunction]
fn aggregate_perspectives(
    extractions: Vec<Vec<String>>,
    k_d: usize,
) -> PyResult<(Vec<String>, BTreeMap<String, usize>)> {
    let set = summarize::aggregate_perspectives("python", &extractions, k_d).map_err(py_err)?;
    Ok((set.core, set.counts))
}

/// Run the offline pipeline with the mock backend unless `backend` is given.
/// Returns the executed and skipped step names.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (name, metadata, interactions, base, work, config = None, backend = "mock", until = None))]
fn run_pipeline(
    name: &str,
    metadata: PathBuf,
    interactions: PathBuf,
    base: PathBuf,
    work: PathBuf,
    config: Option<PyConfig>,
    backend: &str,
    until: Option<&str>,
) -> PyResult<(Vec<String>, Vec<String>)> {
    let mut spec = PipelineSpec::new(name, metadata, interactions, base, work);
    if let Some(c) = config {
        spec.cfg = c.inner;
    }
    spec.backend_id = backend.to_string();
    let out = pipeline::run_pipeline(&spec, until).map_err(py_err)?;
    Ok((out.executed, out.skipped))
}

#[pymodule]
fn ppsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyMockBackend>()?;
    m.add_function(wrap_pyfunction!(purchase_probability, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(mrr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(select_history, m)?)?;
    m.add_function(wrap_pyfunction!(extract_query, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_perspectives, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("STEPS", pipeline::STEPS.to_vec())?;
    Ok(())
}
