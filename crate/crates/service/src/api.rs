use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hticl::inference::{Classifier, InferenceConfig, InferenceError, InferenceTrace, LlmError};
use hticl::{NodeId, Taxonomy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::annotation::{majority_vote, AnnotationMode, AnnotationRecord, VoteOutcome};
use crate::{AppState, ServiceError};

type Shared = Arc<AppState>;

/// Build the `/api` router over `state`.
pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/taxonomy", get(taxonomy))
        .route("/api/retrieve", post(retrieve))
        .route("/api/classify", post(classify))
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/annotation", post(annotate))
        .route("/api/stats", get(stats))
        .route("/api/admin/reload", post(reload))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

#[derive(Debug)]
pub(crate) struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "database is reloading")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.status, self.message);
        }
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<InferenceError> for ApiError {
    fn from(e: InferenceError) -> Self {
        let status = match &e {
            InferenceError::Config(_) => StatusCode::BAD_REQUEST,
            InferenceError::Llm(LlmError::Timeout) => StatusCode::GATEWAY_TIMEOUT,
            InferenceError::Llm(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))
}

/// JSON body whose every failure (syntax, missing field, wrong type) is a 400.
pub(crate) struct ApiJson<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let bytes = Bytes::from_request(req, state).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        serde_json::from_slice(&bytes).map(ApiJson).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
    }
}

async fn require_token(State(state): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

fn node_json(tax: &Taxonomy, id: NodeId) -> Value {
    let children: Vec<Value> =
        tax.children_of(id).unwrap_or_default().iter().map(|&c| node_json(tax, c)).collect();
    if id == NodeId::ROOT {
        return json!({ "id": id.0, "name": tax.qualified_name(id), "level": 0, "children": children });
    }
    let node = tax.node(id).expect("child ids are valid");
    json!({
        "id": id.0,
        "name": node.name,
        "qualified": tax.qualified_name(id),
        "level": node.level,
        "description": node.description,
        "children": children,
    })
}

async fn taxonomy(State(state): State<Shared>) -> Json<Value> {
    let tax = &state.taxonomy;
    Json(json!({ "depth": tax.depth(), "root": node_json(tax, NodeId::ROOT) }))
}

fn default_k() -> usize {
    3
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveBody {
    text: String,
    #[serde(default = "default_k")]
    k: usize,
}

#[derive(Serialize)]
struct RetrievedHit {
    rank: usize,
    doc_id: String,
    score: f64,
    path: Vec<u32>,
    labels: Vec<String>,
    text: Option<String>,
}

async fn retrieve(State(state): State<Shared>, ApiJson(body): ApiJson<RetrieveBody>) -> Result<Json<Value>, ApiError> {
    if state.is_reloading() {
        return Err(ApiError::unavailable());
    }
    if body.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let query = hticl::indexer::encode(&hticl::corpus::tokenize(&body.text), &state.params)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .index_f32();
    let db = state.db.snapshot();
    let texts = state.texts();
    let hits = db
        .search_topk_diverse(&query, body.k, Default::default(), Some(&state.taxonomy))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let hits: Vec<RetrievedHit> = hits
        .iter()
        .enumerate()
        .map(|(i, h)| RetrievedHit {
            rank: i + 1,
            doc_id: h.instance.doc_id.clone(),
            score: h.score,
            path: h.instance.path.nodes().iter().map(|n| n.0).collect(),
            labels: state.taxonomy.path_names(&h.instance.path),
            text: texts.get(&h.instance.doc_id).cloned(),
        })
        .collect();
    Ok(Json(json!({ "db_fingerprint": db.encoder_fingerprint, "db_size": db.len(), "hits": hits })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyBody {
    text: String,
    #[serde(default)]
    options: Option<Value>,
}

async fn classify(
    State(state): State<Shared>,
    ApiJson(body): ApiJson<ClassifyBody>,
) -> Result<Json<InferenceTrace>, ApiError> {
    if state.is_reloading() {
        return Err(ApiError::unavailable());
    }
    let mut cfg = state.default_inference();
    if let Some(Value::Object(overrides)) = body.options {
        let mut merged = serde_json::to_value(&cfg).expect("config serializes");
        merged.as_object_mut().expect("object").extend(overrides);
        cfg = serde_json::from_value::<InferenceConfig>(merged)
            .map_err(|e| ApiError::bad_request(format!("invalid options: {e}")))?;
    } else if body.options.is_some_and(|v| !v.is_null()) {
        return Err(ApiError::bad_request("options must be an object"));
    }
    // The client is fixed at start-up; a request cannot point it elsewhere.
    cfg.llm = state.llm_selector().to_string();
    let trace = tokio::task::spawn_blocking(move || {
        let db = state.db.snapshot();
        let texts = state.texts();
        let c = Classifier::new(&state.taxonomy, &state.params, &db, &texts, &cfg)?;
        c.classify(&body.text, state.llm())
    })
    .await
    .map_err(join_error)??;
    Ok(Json(trace))
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_task(State(state): State<Shared>, Query(q): Query<NextQuery>) -> Response {
    let ann = state.annotations();
    let annotated: std::collections::HashSet<&str> = ann.records.iter().map(|r| r.doc_id.as_str()).collect();
    let pending = |id: &str| match &q.annotator {
        Some(who) => !ann.done.contains(&(id.to_string(), who.clone())),
        None => !annotated.contains(id),
    };
    let mut open = state.tasks().iter().filter(|t| pending(&t.id));
    match open.next() {
        Some(task) => {
            let remaining = 1 + open.count();
            Json(json!({ "id": task.id, "text": task.text, "remaining": remaining })).into_response()
        }
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateBody {
    annotator: String,
    /// Label names, level 1 first.
    path: Vec<String>,
    seconds: f64,
    #[serde(default)]
    mode: AnnotationMode,
    #[serde(default)]
    suggestions: Vec<Vec<String>>,
}

async fn annotate(
    State(state): State<Shared>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<AnnotateBody>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    if state.is_reloading() {
        return Err(ApiError::unavailable());
    }
    if state.task(&id).is_none() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no task `{id}`")));
    }
    if body.annotator.trim().is_empty() {
        return Err(ApiError::bad_request("annotator must be non-empty"));
    }
    if !(body.seconds.is_finite() && body.seconds >= 0.0) {
        return Err(ApiError::bad_request("seconds must be finite and >= 0"));
    }
    if body.suggestions.len() > state.taxonomy.depth() {
        return Err(ApiError::bad_request("more suggestion levels than taxonomy levels"));
    }
    let path = state.taxonomy.resolve_names(&body.path).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let timestamp_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
    let record = AnnotationRecord {
        seq: 0,
        doc_id: id,
        annotator: body.annotator,
        labels: body.path,
        path,
        mode: body.mode,
        suggestions: body.suggestions,
        seconds: body.seconds,
        timestamp_ms,
    };

    tokio::task::spawn_blocking(move || {
        let mut ann = state.annotations();
        let key = (record.doc_id.clone(), record.annotator.clone());
        if ann.done.contains(&key) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("`{}` already annotated `{}`", key.1, key.0),
            ));
        }
        let record = ann.log.append(record)?;
        ann.done.insert(key);
        ann.records.push(record.clone());
        let mut appended = false;
        if state.append_on_annotate {
            let before = ann.appended.contains(&record.doc_id);
            match state.append_locked(&mut ann, &record) {
                Ok(()) => appended = !before && ann.appended.contains(&record.doc_id),
                // The annotation is already durable; the db catches up on reload.
                Err(e) => log::error!("append of `{}` failed: {e}", record.doc_id),
            }
        }
        let db_size = state.db.snapshot().len();
        Ok((StatusCode::CREATED, Json(json!({ "record": record, "appended": appended, "db_size": db_size }))))
    })
    .await
    .map_err(join_error)?
}

#[derive(Serialize, Default)]
struct ModeStats {
    count: usize,
    mean_seconds: Option<f64>,
    /// Annotations per hour of annotator time.
    per_hour: Option<f64>,
}

async fn stats(State(state): State<Shared>) -> Json<Value> {
    let ann = state.annotations();
    let mut by_mode: BTreeMap<&str, (usize, f64)> =
        AnnotationMode::ALL.iter().map(|m| (m.as_str(), (0, 0.0))).collect();
    let mut by_annotator: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &ann.records {
        let e = by_mode.entry(r.mode.as_str()).or_default();
        e.0 += 1;
        e.1 += r.seconds;
        *by_annotator.entry(&r.annotator).or_default() += 1;
    }
    let by_mode: BTreeMap<&str, ModeStats> = by_mode
        .into_iter()
        .map(|(m, (n, secs))| {
            let mean = (n > 0).then(|| secs / n as f64);
            let per_hour = (secs > 0.0).then(|| n as f64 * 3600.0 / secs);
            (m, ModeStats { count: n, mean_seconds: mean, per_hour })
        })
        .collect();

    let votes = majority_vote(&ann.records);
    let multi: Vec<_> = votes.iter().filter(|v| v.annotators >= 2).collect();
    let unanimous = multi.iter().filter(|v| matches!(v.outcome, VoteOutcome::Majority { unanimous: true, .. })).count();
    let majority = multi.iter().filter(|v| matches!(v.outcome, VoteOutcome::Majority { unanimous: false, .. })).count();
    let unresolved = multi.len() - unanimous - majority;
    let remaining = state.tasks().iter().filter(|t| !votes.iter().any(|v| v.doc_id == t.id)).count();

    Json(json!({
        "annotations": ann.records.len(),
        "by_mode": by_mode,
        "by_annotator": by_annotator,
        "agreement": {
            "documents": votes.len(),
            "multiply_annotated": multi.len(),
            "unanimous": unanimous,
            "majority": majority,
            "unresolved": unresolved,
        },
        "tasks": state.tasks().len(),
        "remaining_tasks": remaining,
        "db_size": state.db.snapshot().len(),
    }))
}

async fn reload(State(state): State<Shared>) -> Result<Json<Value>, ApiError> {
    if state.reloading.swap(true, std::sync::atomic::Ordering::SeqCst) {
        return Err(ApiError::unavailable());
    }
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || worker.reload()).await;
    state.set_reloading(false);
    let size = result.map_err(join_error)??;
    Ok(Json(json!({ "db_size": size, "db_fingerprint": state.db.snapshot().encoder_fingerprint })))
}
