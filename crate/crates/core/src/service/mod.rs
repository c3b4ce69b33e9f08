//! HTTP API over scenario sessions.
//!
//! Sessions are created from a scenario document and then grow by posted
//! events. Reads evaluate the current record on a throwaway orchestrator, so
//! only event posts change a session.

mod store;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::code::Code;
use crate::criteria::World;
use crate::graph::ValidationIssue;
use crate::history::timeline_export;
use crate::navigator::Recommendation;
use crate::necessity::{simulate_batch, BatchEntry};
use crate::orchestrator::{
    export_audit, inject_event, AssetRef, AuditEntry, Engine, Orchestrator, Scenario, TwinError, NAVIGATOR,
};
use crate::patient::{default_as_of, snapshot_at, ClinicalEvent, OverlayFact, PatientRecord};

pub use store::{SessionDoc, SessionStore, StoreError};

pub const EXPECTED_REVISION: &str = "expected-revision";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    NotFound,
    Validation,
    Conflict,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into(), detail: Value::Null }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn status(&self) -> StatusCode {
        match self.code {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Validation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::new(ErrorCode::NotFound, e.to_string()),
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

fn validation(message: impl Into<String>) -> ApiError {
    ApiError::new(ErrorCode::Validation, message)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| validation(format!("request body: {e}")))
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", post(post_event))
        .route("/sessions/{id}/recommendations", get(get_recommendations))
        .route("/sessions/{id}/timeline", get(get_timeline))
        .route("/sessions/{id}/necessity/simulate", post(simulate_necessity))
        .route("/sessions/{id}/audit", get(get_audit))
        .route("/assets/graphs/{id}", get(get_graph))
        .with_state(AppState { store })
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, store: Arc<SessionStore>) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

/// Only bundled or inline assets: a request must not name server files.
fn check_refs(scenario: &Scenario) -> Result<(), ApiError> {
    let refs = [
        ("graph", &scenario.graph),
        ("registry", &scenario.registry),
        ("code_map", &scenario.code_map),
        ("patient", &scenario.patient),
    ];
    let issues: Vec<ValidationIssue> = refs
        .iter()
        .filter_map(|(field, r)| match r {
            AssetRef::Path(p) if !p.starts_with(crate::assets::BUNDLED_PREFIX) => Some(ValidationIssue::error(
                *field,
                format!("`{p}`: only bundled: references or inline assets are accepted"),
            )),
            _ => None,
        })
        .collect();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(validation("scenario references files").with_detail(json!({ "issues": issues })))
    }
}

fn engine_of(doc: &SessionDoc) -> Result<Arc<Engine>, ApiError> {
    doc.scenario
        .resolve(None)
        .map(|(engine, _)| Arc::new(engine))
        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("stored scenario no longer loads: {e}")))
}

#[derive(Serialize)]
struct SessionView<'a> {
    id: &'a str,
    revision: u64,
    graph_id: String,
    record: &'a PatientRecord,
    audit_entries: usize,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let scenario: Scenario = parse_body(&body)?;
    check_refs(&scenario)?;
    let (engine, record, warnings) =
        scenario.prepare(None).map_err(|e| validation(e.to_string()).with_detail(json!({ "issues": e.issues() })))?;
    let doc = state.store.create(scenario, record)?;
    tracing::info!(session = %doc.id, graph = %engine.graph.id, "session created");
    Ok((StatusCode::CREATED, Json(json!({ "id": doc.id, "revision": doc.revision, "warnings": warnings }))))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let doc = state.store.load(&id)?;
    let engine = engine_of(&doc)?;
    let view = SessionView {
        id: &doc.id,
        revision: doc.revision,
        graph_id: engine.graph.id.clone(),
        record: &doc.record,
        audit_entries: doc.audit.len(),
    };
    Ok(Json(serde_json::to_value(view).expect("views serialize")))
}

async fn post_event(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let expected = match headers.get(EXPECTED_REVISION) {
        None => None,
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| validation("expected-revision header must be a non-negative integer"))?,
        ),
    };
    let event: ClinicalEvent = parse_body(&body)?;
    let revision = state.store.update(&id, |doc| {
        if let Some(expected) = expected {
            if expected != doc.revision {
                return Err(ApiError::new(
                    ErrorCode::Conflict,
                    format!("session is at revision {}, not {expected}", doc.revision),
                )
                .with_detail(json!({ "revision": doc.revision })));
            }
        }
        let engine = engine_of(doc)?;
        let mut orch = Orchestrator::new(engine, doc.record.clone()).resume(doc.clock, doc.next_message);
        inject_event(&mut orch, event).map_err(validation)?;
        doc.record = orch.record().clone();
        doc.clock = orch.clock();
        doc.next_message = orch.next_message();
        doc.audit.extend(orch.into_audit());
        Ok::<_, ApiError>(doc.revision + 1)
    })?;
    Ok(Json(json!({ "revision": revision })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadQuery {
    as_of: Option<NaiveDate>,
    world: Option<World>,
}

fn read_query(q: Result<Query<ReadQuery>, axum::extract::rejection::QueryRejection>) -> Result<ReadQuery, ApiError> {
    q.map(|Query(q)| q).map_err(|e| validation(e.body_text()))
}

#[derive(Serialize)]
struct RecommendationsView {
    session: String,
    revision: u64,
    as_of: NaiveDate,
    world: World,
    recommendations: Vec<Recommendation>,
    audit: Vec<AuditEntry>,
}

async fn get_recommendations(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<ReadQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let q = read_query(query)?;
    let doc = state.store.load(&id)?;
    let engine = engine_of(&doc)?;
    let as_of = q.as_of.unwrap_or_else(|| default_as_of(&doc.record));
    let world = q.world.unwrap_or_default();

    let mut orch = Orchestrator::new(engine, doc.record.clone()).resume(doc.clock, doc.next_message);
    let recs = orch
        .call("clinician", NAVIGATOR, "next_steps", json!({ "as_of": as_of, "world": world }))
        .and_then(|v| serde_json::from_value(v).map_err(|e| TwinError::Failed(e.to_string())))
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    let view = RecommendationsView {
        session: doc.id.clone(),
        revision: doc.revision,
        as_of,
        world,
        recommendations: recs,
        audit: orch.into_audit(),
    };
    Ok(Json(serde_json::to_value(view).expect("views serialize")))
}

async fn get_timeline(
    State(state): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<ReadQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let q = read_query(query)?;
    let doc = state.store.load(&id)?;
    let engine = engine_of(&doc)?;
    let as_of = q.as_of.unwrap_or_else(|| default_as_of(&doc.record));
    let export = timeline_export(&doc.record, &engine.graph, as_of, &engine.history);
    Ok(Json(serde_json::to_value(export).expect("exports serialize")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateRequest {
    codes: Vec<Code>,
    #[serde(default)]
    world: World,
    #[serde(default)]
    as_of: Option<NaiveDate>,
    #[serde(default)]
    what_if: Vec<OverlayFact>,
}

#[derive(Serialize)]
struct SimulateView {
    as_of: NaiveDate,
    world: World,
    determinations: Vec<BatchEntry>,
}

async fn simulate_necessity(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let doc = state.store.load(&id)?;
    let engine = engine_of(&doc)?;
    let req: SimulateRequest = parse_body(&body)?;
    if req.codes.is_empty() {
        return Err(validation("codes must not be empty"));
    }
    let as_of = req.as_of.unwrap_or_else(|| default_as_of(&doc.record));
    let overlay: Vec<_> = req.what_if.iter().map(|f| f.at(as_of)).collect();
    let snapshot = snapshot_at(&doc.record, as_of).with_overlay(&overlay);
    let determinations = simulate_batch(&engine.registry, &doc.record.payer_id, &req.codes, &snapshot, req.world);
    let view = SimulateView { as_of, world: req.world, determinations };
    Ok(Json(serde_json::to_value(view).expect("views serialize")))
}

async fn get_audit(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let doc = state.store.load(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], export_audit(&doc.audit)).into_response())
}

async fn get_graph(Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let graph = crate::assets::bundled_graph(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("graph `{id}` not found")))?;
    Ok(Json(serde_json::to_value(&graph).expect("graphs serialize")))
}
