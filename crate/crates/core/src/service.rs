//! HTTP reranking service over preloaded artifacts.
//!
//! The listener opens immediately and answers 503 until loading finishes.
//! Handlers share immutable state and call the same scoring path as the
//! batch `rerank` command.

use std::collections::{HashMap, HashSet};
use std::future::IntoFuture;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::Backend;
use crate::config::PipelineConfig;
use crate::domain::{normalize_query_text, Query, RankedEntry};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::pipeline::{self, SCORE_STAGE};
use crate::prompt::TemplateSet;
use crate::rerank::{self, CandidateHistory, RerankContext};
use crate::select::{self, EmbeddingStore};

pub const PORT_ENV: &str = "PPSR_PORT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub user_id: String,
    #[serde(default)]
    pub query_id: Option<String>,
    #[serde(default)]
    pub query_text: Option<String>,
    pub candidate_ids: Vec<String>,
    /// Only history strictly before this timestamp is visible. Defaults to
    /// the whole history.
    #[serde(default)]
    pub before_timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub ranking: Vec<RankedEntry>,
    pub selected_history: Vec<CandidateHistory>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounts {
    pub products: usize,
    pub users: usize,
    pub queries: usize,
    pub logs: usize,
    pub embeddings: usize,
    pub summaries: usize,
}

/// Everything the handlers read after startup.
pub struct Loaded {
    pub dataset: Dataset,
    pub store: EmbeddingStore,
    pub summaries: usize,
    pub backend: Box<dyn Backend>,
    pub templates: TemplateSet,
    pub cfg: PipelineConfig,
    pub use_summary: bool,
    pub started_at: u64,
    query_cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct LoadSpec {
    pub dataset: PathBuf,
    pub summaries: Option<PathBuf>,
    pub store: PathBuf,
    pub backend_id: String,
    pub cfg: PipelineConfig,
    pub template_dir: Option<PathBuf>,
}

impl Loaded {
    pub fn load(spec: &LoadSpec) -> Result<Self> {
        let (split, use_summary) =
            pipeline::load_dataset_with_summaries(&spec.dataset, spec.summaries.as_deref())?;
        let summaries = split
            .train
            .catalog
            .values()
            .filter(|p| p.summary.is_some())
            .count();
        let store = EmbeddingStore::load(&spec.store)?;
        let backend = pipeline::make_backend(&spec.backend_id, &spec.cfg, SCORE_STAGE)?;
        let templates = match &spec.template_dir {
            Some(d) => TemplateSet::with_overrides(d)?,
            None => TemplateSet::builtin(),
        };
        let mut dataset = split.train.clone();
        dataset.logs.extend(split.test.logs);
        Self::new(
            dataset,
            store,
            summaries,
            backend,
            templates,
            spec.cfg.clone(),
            use_summary,
        )
    }

    pub fn new(
        dataset: Dataset,
        store: EmbeddingStore,
        summaries: usize,
        backend: Box<dyn Backend>,
        templates: TemplateSet,
        cfg: PipelineConfig,
        use_summary: bool,
    ) -> Result<Self> {
        let dim = backend.descriptor().embedding_dim;
        if store.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: store.dim,
            });
        }
        if let Some(p) = dataset
            .catalog
            .keys()
            .find(|p| !store.contains(&select::product_key(p)))
        {
            return Err(Error::MissingEmbedding(p.clone()));
        }
        let started_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        Ok(Loaded {
            dataset,
            store,
            summaries,
            backend,
            templates,
            cfg,
            use_summary,
            started_at,
            query_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn counts(&self) -> StoreCounts {
        let c = self.dataset.counts();
        StoreCounts {
            products: c.products,
            users: c.users,
            queries: c.queries,
            logs: c.logs,
            embeddings: self.store.len(),
            summaries: self.summaries,
        }
    }

    /// Resolve the request's query and its vector. Known query ids and texts
    /// use the stored vector; other text is embedded once and cached.
    fn resolve_query(&self, req: &RerankRequest) -> Result<(Query, Vec<f64>)> {
        if let Some(id) = &req.query_id {
            let q = self.dataset.query(id)?.clone();
            let v = self.store.get(&select::query_key(id))?.to_vec();
            return Ok((q, v));
        }
        let text = req
            .query_text
            .as_deref()
            .map(normalize_query_text)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::InvalidInput("query_id or query_text is required".into()))?;
        if let Some(q) = self.dataset.query_by_text(&text) {
            if let Ok(v) = self.store.get(&select::query_key(&q.query_id)) {
                return Ok((q.clone(), v.to_vec()));
            }
        }
        let query = Query::new(crate::ingest::query_id_for(&text), text.clone())?;
        if let Some(v) = self.query_cache.lock().expect("query cache").get(&text) {
            return Ok((query, v.clone()));
        }
        let v = self.backend.embed(&text, None)?.values;
        self.query_cache
            .lock()
            .expect("query cache")
            .insert(text, v.clone());
        Ok((query, v))
    }

    /// Validate and score a request through the shared rerank path.
    pub fn rerank(&self, req: &RerankRequest) -> std::result::Result<RerankResponse, ApiError> {
        let history = self.dataset.history(&req.user_id).map_err(ApiError::from)?;
        if req.candidate_ids.is_empty() {
            return Err(ApiError::bad_request("candidate_ids must be non-empty"));
        }
        if req.candidate_ids.len() > self.cfg.k_p {
            return Err(ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                message: format!(
                    "{} candidates exceed K_p = {}",
                    req.candidate_ids.len(),
                    self.cfg.k_p
                ),
            });
        }
        let mut seen = HashSet::new();
        for id in &req.candidate_ids {
            self.dataset.product(id).map_err(ApiError::from)?;
            if !seen.insert(id) {
                return Err(ApiError::bad_request(format!("duplicate candidate {id}")));
            }
        }
        let events = match req.before_timestamp {
            Some(ts) => history.before(ts),
            None => &history.events,
        };
        let (query, qvec) = self.resolve_query(req).map_err(ApiError::from)?;
        let ctx = RerankContext {
            dataset: &self.dataset,
            store: &self.store,
            backend: self.backend.as_ref(),
            templates: &self.templates,
            cfg: &self.cfg,
            use_summary: self.use_summary,
        };
        let out = rerank::rerank_candidates(&ctx, events, &query, &qvec, &req.candidate_ids)
            .map_err(ApiError::from)?;
        Ok(RerankResponse {
            ranking: out.ranking.entries,
            selected_history: out.selected_history,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownId { .. } | Error::InvalidInput(_) | Error::EmptyCandidates => {
                StatusCode::BAD_REQUEST
            }
            Error::Backend(_) | Error::MissingDecisionToken(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// Shared handler state: empty until loading completes.
#[derive(Clone, Default)]
pub struct AppState {
    loaded: Arc<OnceLock<Arc<Loaded>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::default();
        s.set(loaded);
        s
    }

    pub fn set(&self, loaded: Loaded) {
        if self.loaded.set(Arc::new(loaded)).is_err() {
            tracing::warn!("service state already loaded");
        }
    }

    fn get(&self) -> std::result::Result<Arc<Loaded>, ApiError> {
        self.loaded.get().cloned().ok_or(ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: "loading".into(),
        })
    }
}

async fn handle_rerank(
    State(state): State<AppState>,
    Json(req): Json<RerankRequest>,
) -> std::result::Result<Json<RerankResponse>, ApiError> {
    let loaded = state.get()?;
    let out = tokio::task::spawn_blocking(move || loaded.rerank(&req))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    Ok(Json(out))
}

async fn handle_health(State(state): State<AppState>) -> Response {
    match state.get() {
        Ok(l) => Json(json!({
            "status": "ok",
            "dataset_name": l.dataset.name,
            "store_counts": l.counts(),
            "backend_id": l.backend.descriptor().backend_id,
        }))
        .into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading" })),
        )
            .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/rerank", post(handle_rerank))
        .route("/v1/health", get(handle_health))
        .with_state(state)
}

/// Bind, start answering, then load. Returns when the server stops or the
/// load fails.
pub async fn serve(spec: LoadSpec, port: u16) -> Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    tracing::info!(%addr, "listening");
    let state = AppState::loading();
    let server = tokio::spawn(axum::serve(listener, router(state.clone())).into_future());
    let loaded = tokio::task::spawn_blocking(move || Loaded::load(&spec))
        .await
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    match loaded {
        Ok(l) => {
            tracing::info!(products = l.dataset.catalog.len(), "loaded");
            state.set(l);
        }
        Err(e) => {
            server.abort();
            return Err(e);
        }
    }
    server
        .await
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .map_err(|e| Error::io(addr.to_string(), e))
}
