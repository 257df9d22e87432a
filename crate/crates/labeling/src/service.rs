//! HTTP interface consumed by the review UI.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/proposals` | start a proposal job, `202 {job_id}` |
//! | GET | `/jobs/{id}` | job status |
//! | POST | `/sessions` | open a review session |
//! | GET | `/sessions/{id}` | session with status counts |
//! | GET | `/sessions/{id}/next` | next pending proposal, `204` when none |
//! | POST | `/sessions/{id}/decisions` | apply a decision, `409` on version conflict |
//! | GET | `/sessions/{id}/audit` | decisions made in the session |
//! | GET | `/export?status=` | NDJSON manifest of decided records |
//! | GET | `/images/{sample_id}` | PNG rendering of a proposal's image |
//! | GET | `/taxonomy` | the taxonomy in use |

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use statechef::dataset::{encode_png, ImageSource};
use statechef::manifest::{DatasetManifest, SampleRecord};

use crate::propose::ProposalBatch;
use crate::store::{Decision, ProposalStatus, ProposalStore, ReviewSession, StatusCounts, StoreError};

/// Produces proposals for a job. Runs on a blocking thread.
pub trait ProposalEngine: Send + Sync {
    fn propose(&self, records: &[SampleRecord], k: usize) -> Result<ProposalBatch, String>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub submitted: usize,
    pub proposed: usize,
    pub skipped: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<ProposalStore>>,
    jobs: Arc<Mutex<BTreeMap<String, JobStatus>>>,
    engine: Arc<dyn ProposalEngine>,
    images: Arc<dyn ImageSource + Send>,
    image_size: (usize, usize),
}

impl AppState {
    pub fn new(
        store: ProposalStore,
        engine: Arc<dyn ProposalEngine>,
        images: Arc<dyn ImageSource + Send>,
        image_size: (usize, usize),
    ) -> Self {
        Self {
            store: Arc::new(Mutex::new(store)),
            jobs: Arc::default(),
            engine,
            images,
            image_size,
        }
    }

    pub fn store(&self) -> Arc<Mutex<ProposalStore>> {
        self.store.clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/proposals", post(submit_proposals))
        .route("/jobs/{id}", get(job_status))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_proposal))
        .route("/sessions/{id}/decisions", post(decide))
        .route("/sessions/{id}/audit", get(audit))
        .route("/export", get(export))
        .route("/images/{sample_id}", get(image))
        .route("/taxonomy", get(taxonomy))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl std::fmt::Display) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownSession(_) | StoreError::UnknownProposal(_) => StatusCode::NOT_FOUND,
            StoreError::VersionConflict { .. } | StoreError::NotPending { .. } | StoreError::AlreadyPending(_) => {
                StatusCode::CONFLICT
            }
            StoreError::DuplicateProposal(_) => StatusCode::CONFLICT,
            StoreError::InvalidOverride { .. }
            | StoreError::InvalidProposal { .. }
            | StoreError::BadExportStatus(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": e.to_string(), "retryable": e.is_retryable() });
        if let StoreError::VersionConflict { actual, .. } = e {
            body["actual_version"] = json!(actual);
        }
        Self { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` against the store on a blocking thread; store writes fsync.
async fn with_store<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut ProposalStore) -> Result<T, StoreError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = store.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
    .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
pub struct ProposalRequest {
    /// Path of a manifest file readable by the service.
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub records: Vec<SampleRecord>,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    3
}

async fn submit_proposals(State(state): State<AppState>, Json(req): Json<ProposalRequest>) -> ApiResult<Response> {
    if req.k == 0 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "k must be at least 1"));
    }
    if req.manifest.is_none() && req.records.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "give a manifest path or inline records",
        ));
    }
    let job_id = {
        let mut jobs = state.jobs.lock().unwrap_or_else(|p| p.into_inner());
        let job_id = format!("job-{:06}", jobs.len() + 1);
        jobs.insert(
            job_id.clone(),
            JobStatus {
                job_id: job_id.clone(),
                state: JobState::Running,
                submitted: 0,
                proposed: 0,
                skipped: Vec::new(),
                error: None,
            },
        );
        job_id
    };
    let st = state.clone();
    let id = job_id.clone();
    tokio::task::spawn_blocking(move || {
        let mut records = req.records;
        let outcome = req
            .manifest
            .map(|path| DatasetManifest::load(path).map_err(|e| e.to_string()))
            .transpose()
            .map(|m| {
                records.extend(m.into_iter().flat_map(|m| m.records));
                set_submitted(&st, &id, records.len());
            })
            .and_then(|()| st.engine.propose(&records, req.k))
            .and_then(|batch| {
                let skipped: Vec<String> = batch.skipped.into_iter().map(|(id, _)| id).collect();
                let mut store = st.store.lock().unwrap_or_else(|p| p.into_inner());
                let n = store.add_proposals(&id, batch.proposals).map_err(|e| e.to_string())?;
                Ok((n, skipped))
            });
        let mut jobs = st.jobs.lock().unwrap_or_else(|p| p.into_inner());
        let job = jobs.get_mut(&id).expect("job registered before spawn");
        match outcome {
            Ok((n, skipped)) => {
                job.state = JobState::Done;
                job.proposed = n;
                job.skipped = skipped;
            }
            Err(e) => {
                job.state = JobState::Failed;
                job.error = Some(e);
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

fn set_submitted(state: &AppState, id: &str, n: usize) {
    if let Some(job) = state.jobs.lock().unwrap_or_else(|p| p.into_inner()).get_mut(id) {
        job.submitted = n;
    }
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    let jobs = state.jobs.lock().unwrap_or_else(|p| p.into_inner());
    jobs.get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job `{id}`")))
}

#[derive(Debug, Deserialize)]
pub struct SessionRequest {
    pub reviewer: String,
}

async fn open_session(State(state): State<AppState>, Json(req): Json<SessionRequest>) -> ApiResult<Response> {
    if req.reviewer.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "reviewer must not be empty",
        ));
    }
    let session = with_store(&state, move |s| s.open_session(&req.reviewer)).await?;
    Ok((StatusCode::CREATED, Json(session)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: ReviewSession,
    pub counts: StatusCounts,
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    with_store(&state, move |s| {
        Ok(SessionView {
            session: s.session(&id)?,
            counts: s.counts(),
        })
    })
    .await
    .map(Json)
}

async fn next_proposal(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let next = with_store(&state, move |s| Ok(s.next(&id)?.cloned())).await?;
    Ok(match next {
        Some(p) => Json(p).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Debug, Deserialize)]
pub struct DecisionRequest {
    pub proposal_id: String,
    pub decision: Decision,
    pub expected_version: u64,
}

async fn decide(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Response> {
    let outcome = with_store(&state, move |s| {
        s.decide(&id, &req.proposal_id, req.decision, req.expected_version)
    })
    .await?;
    Ok(Json(outcome).into_response())
}

async fn audit(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let entries = with_store(&state, move |s| {
        s.session(&id)?;
        Ok(s.audit(Some(&id)).into_iter().cloned().collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(entries).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    pub status: Option<String>,
}

async fn export(State(state): State<AppState>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let status = match q.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some(s) => Some(
            s.parse::<ProposalStatus>()
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?,
        ),
    };
    let manifest = with_store(&state, move |s| s.export(status)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], manifest.to_jsonl()).into_response())
}

async fn image(State(state): State<AppState>, Path(sample_id): Path<String>) -> ApiResult<Response> {
    let record = {
        let store = state.store.lock().unwrap_or_else(|p| p.into_inner());
        store.proposal_by_sample(&sample_id).map(|p| p.record.clone())
    }
    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no proposal for sample `{sample_id}`")))?;
    let images = state.images.clone();
    let size = state.image_size;
    let png = tokio::task::spawn_blocking(move || images.load(&record, size).map(|img| encode_png(img.view())))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn taxonomy(State(state): State<AppState>) -> Response {
    let text = state
        .store
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .taxonomy()
        .to_json();
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}
