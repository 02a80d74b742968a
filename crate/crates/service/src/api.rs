//! JSON HTTP API over one workflow root.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use peak_core::context::{ContextDigest, RegionKind};
use peak_core::perf::PerfReport;
use peak_core::store::{Checkpoint, CheckpointDiff, Trajectory};
use peak_core::validation::ValidationReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::jobs::{ErrorBody, Job, JobSpec, Jobs};
use crate::session::{CatalogEntry, EvaluateRequest, Session};

#[derive(Clone)]
pub struct AppState {
    pub session: Arc<Session>,
    pub jobs: Arc<Jobs>,
}

pub struct ApiError(ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody::from(&self.0))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v).map_err(|e| ApiError(ServiceError::InvalidArgument(e.body_text())))
}

/// Parse a JSON body, reporting any problem as 422.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(ServiceError::InvalidArgument(format!("invalid body: {e}"))))
}

#[derive(Serialize, Deserialize)]
pub struct Edge {
    pub parent: ContextDigest,
    pub child: ContextDigest,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointList {
    pub checkpoints: Vec<Checkpoint>,
    pub edges: Vec<Edge>,
    pub refs: BTreeMap<String, ContextDigest>,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointDetail {
    pub checkpoint: Checkpoint,
    pub children: Vec<ContextDigest>,
    pub refs: Vec<String>,
    pub validation: Option<ValidationReport>,
    pub perf: Option<PerfReport>,
}

#[derive(Serialize, Deserialize)]
pub struct RegionText {
    pub id: ContextDigest,
    pub region: RegionKind,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
pub struct Accepted {
    pub job_id: u64,
    pub status_url: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformBody {
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RefBody {
    name: String,
    id: String,
}

#[derive(Serialize, Deserialize)]
pub struct RefSet {
    pub name: String,
    pub id: ContextDigest,
}

#[derive(Deserialize)]
struct DiffQuery {
    a: String,
    b: String,
}

#[derive(Deserialize)]
struct TrajectoryQuery {
    tip: String,
    reference_ms: Option<f64>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/checkpoints", get(list_checkpoints))
        .route("/api/checkpoints/{id}", get(checkpoint))
        .route("/api/checkpoints/{id}/region/{kind}", get(region))
        .route("/api/checkpoints/{id}/transform", post(transform))
        .route("/api/checkpoints/{id}/evaluate", post(evaluate))
        .route("/api/diff", get(diff))
        .route("/api/trajectory", get(trajectory))
        .route("/api/transformations", get(transformations))
        .route("/api/jobs", get(jobs))
        .route("/api/jobs/{id}", get(job))
        .route("/api/refs", get(refs).post(set_ref))
        .fallback(not_found)
        .with_state(state)
}

async fn not_found() -> Response {
    let body = ErrorBody { code: "NOT_FOUND".into(), message: "no such endpoint".into() };
    (StatusCode::NOT_FOUND, Json(body)).into_response()
}

async fn list_checkpoints(State(s): State<AppState>) -> ApiResult<CheckpointList> {
    let store = s.session.store();
    let checkpoints = store.checkpoints()?;
    let edges = checkpoints
        .iter()
        .filter_map(|c| c.parent.clone().map(|p| Edge { parent: p, child: c.id.clone() }))
        .collect();
    Ok(Json(CheckpointList { checkpoints, edges, refs: store.refs()? }))
}

async fn checkpoint(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<CheckpointDetail> {
    let store = s.session.store();
    let id = s.session.resolve(&id)?;
    Ok(Json(CheckpointDetail {
        checkpoint: store.checkpoint(&id)?,
        children: store.children(&id)?,
        refs: store.refs()?.into_iter().filter(|(_, t)| *t == id).map(|(n, _)| n).collect(),
        validation: store.validation_report(&id)?,
        perf: store.perf_report(&id)?,
    }))
}

async fn region(State(s): State<AppState>, Path((id, kind)): Path<(String, String)>) -> ApiResult<RegionText> {
    let region = RegionKind::parse(&kind)
        .ok_or_else(|| ServiceError::InvalidArgument(format!("unknown region `{kind}` (device, host or macros)")))?;
    let id = s.session.resolve(&id)?;
    let text = s.session.region(id.hex(), region)?;
    Ok(Json(RegionText { id, region, text }))
}

fn accepted(job: Job) -> Response {
    let body = Accepted { job_id: job.id, status_url: format!("/api/jobs/{}", job.id) };
    (StatusCode::ACCEPTED, Json(body)).into_response()
}

async fn transform(State(s): State<AppState>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ApiError> {
    let id = s.session.resolve(&id)?;
    let b: TransformBody = body(&bytes)?;
    s.session.transformation(&b.name)?;
    Ok(accepted(s.jobs.submit(JobSpec::Transform { checkpoint: id.hex().to_owned(), name: b.name })?))
}

async fn evaluate(State(s): State<AppState>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ApiError> {
    let id = s.session.resolve(&id)?;
    let request: EvaluateRequest = if bytes.iter().all(u8::is_ascii_whitespace) { EvaluateRequest::default() } else { body(&bytes)? };
    Ok(accepted(s.jobs.submit(JobSpec::Evaluate { checkpoint: id.hex().to_owned(), request })?))
}

async fn diff(State(s): State<AppState>, q: Result<Query<DiffQuery>, QueryRejection>) -> ApiResult<CheckpointDiff> {
    let q = query(q)?;
    Ok(Json(s.session.diff(&q.a, &q.b)?))
}

async fn trajectory(State(s): State<AppState>, q: Result<Query<TrajectoryQuery>, QueryRejection>) -> ApiResult<Trajectory> {
    let q = query(q)?;
    Ok(Json(s.session.trajectory(&q.tip, q.reference_ms)?))
}

async fn transformations(State(s): State<AppState>) -> ApiResult<Vec<CatalogEntry>> {
    Ok(Json(s.session.transformations()?))
}

async fn jobs(State(s): State<AppState>) -> ApiResult<Vec<Job>> {
    Ok(Json(s.jobs.list()))
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Job> {
    let id: u64 = id.parse().map_err(|_| ServiceError::InvalidArgument(format!("bad job id `{id}`")))?;
    Ok(Json(s.jobs.get(id)?))
}

async fn refs(State(s): State<AppState>) -> ApiResult<BTreeMap<String, ContextDigest>> {
    Ok(Json(s.session.store().refs()?))
}

async fn set_ref(State(s): State<AppState>, bytes: Bytes) -> ApiResult<RefSet> {
    let b: RefBody = body(&bytes)?;
    let id = s.session.tag(&b.name, &b.id)?;
    Ok(Json(RefSet { name: b.name, id }))
}

/// Serve the API until interrupted.
pub async fn serve(state: AppState, listen: &str) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    // Printed for scripts that start the server on port 0.
    println!("listening on http://{}", listener.local_addr()?);
    let jobs = state.jobs.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    jobs.shutdown();
    Ok(())
}
