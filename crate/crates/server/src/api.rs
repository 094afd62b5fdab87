use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{ApiError, ApiResult};
use crate::session::{Action, Delta, Job, JobStatus, Session, SessionInputs};

/// Large enough for a trained bundle document.
const BODY_LIMIT: usize = 512 * 1024 * 1024;

/// All live sessions. Sessions are independent; the map lock is only held
/// to look one up or insert one.
#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Session>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }

    /// Register a session built from the three documents and return its id.
    pub fn create(&self, inputs: SessionInputs) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Arc::new(Session::new(id.clone(), inputs));
        self.sessions.write().expect("session map lock").insert(id.clone(), session);
        id
    }

    /// Apply one action under the session's mutation lock. Solve jobs run on
    /// the blocking pool; their progress is visible to readers while they
    /// run, and their result is published in one step.
    pub async fn apply(&self, id: &str, revision: u64, action: Action) -> ApiResult<ActionResponse> {
        let session = self.session(id)?;
        let _guard = session.mutation.lock().await;
        let current = session.snapshot();
        if current.revision != revision {
            return Err(ApiError::StaleRevision {
                sent: revision,
                current: current.revision,
            });
        }
        let job = action.is_job().then(|| {
            let job = Arc::new(Job::new(
                uuid::Uuid::new_v4().simple().to_string(),
                action.kind(),
                session.inputs.job_frames(&action),
            ));
            *session.job.lock().expect("job lock") = Some(job.clone());
            job
        });
        let worker_session = session.clone();
        let worker_job = job.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let result = worker_session
                .inputs
                .apply(&current, &action, worker_job.as_deref());
            if let Ok((next, _)) = &result {
                worker_session.publish(next.clone());
            }
            if let Some(j) = &worker_job {
                j.finished.store(true, std::sync::atomic::Ordering::Release);
            }
            result
        })
        .await
        .map_err(|e| ApiError::Worker(e.to_string()))?;
        let (next, delta) = outcome?;
        Ok(ActionResponse {
            revision: next.revision,
            job: job.map(|j| j.status()),
            delta,
        })
    }
}

#[derive(Deserialize)]
struct CreateRequest<'a> {
    #[serde(borrow)]
    rig: &'a RawValue,
    #[serde(borrow)]
    bundle: &'a RawValue,
    #[serde(borrow)]
    track: &'a RawValue,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    pub revision: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionRequest {
    pub revision: u64,
    pub action: Action,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionResponse {
    pub revision: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub job: Option<JobStatus>,
    pub delta: Delta,
}

#[derive(Deserialize)]
struct ExportQuery {
    what: String,
}

/// Parse a request body, reporting the JSON path of the first problem.
fn parse_body<'a, T: Deserialize<'a>>(body: &'a [u8]) -> ApiResult<T> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::invalid(
            if path == "." { String::new() } else { format!("/{}", path.replace('.', "/")) },
            e.into_inner().to_string(),
        )
    })
}

fn parse_owned<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    parse_body(body)
}

fn json_document(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let req: CreateRequest = parse_body(&body)?;
    let (rig, bundle, track) = (req.rig.get().to_owned(), req.bundle.get().to_owned(), req.track.get().to_owned());
    let inputs = tokio::task::spawn_blocking(move || SessionInputs::from_documents(&rig, &bundle, &track))
        .await
        .map_err(|e| ApiError::Worker(e.to_string()))??;
    let id = app.create(inputs);
    Ok((StatusCode::CREATED, Json(CreateResponse { id, revision: 0 })))
}

async fn get_state(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let state = session.state();
    Ok(json_document(serde_json::to_string(&state).expect("state serializes")))
}

async fn post_action(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ActionResponse>> {
    let req: ActionRequest = parse_owned(&body)?;
    Ok(Json(app.apply(&id, req.revision, req.action).await?))
}

async fn get_report(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let data = app.session(&id)?.snapshot();
    let report = data.report.as_ref().ok_or(ApiError::NoReport)?;
    Ok(json_document(report.report.to_json()))
}

async fn export(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let data = session.snapshot();
    let body = match q.what.as_str() {
        "weights" => session.inputs.export_weights(&data)?.to_json(),
        "markers" => session.inputs.export_markers(&data)?.to_json(),
        other => {
            return Err(ApiError::invalid(
                "/what",
                format!("unknown export `{other}`, expected `weights` or `markers`"),
            ))
        }
    };
    Ok(json_document(body))
}

async fn fallback() -> ApiError {
    ApiError::invalid("", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/actions", post(post_action))
        .route("/sessions/{id}/report", get(get_report))
        .route("/sessions/{id}/export", get(export))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}
