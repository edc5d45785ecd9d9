//! HTTP control surface: REST snapshots, control commands and a per-project
//! server-sent-event stream.

pub mod events;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use botforge_core::budget::compute_metrics;
use botforge_core::domain::MilestoneStatus;
use botforge_core::lifecycle::{bootstrap_offline, commit, Observer};
use botforge_core::store::{IssueFilter, IssueStatus};
use botforge_core::{Clock, CostLedger, Milestone, OrchestrationState, Phase, Project, ProjectControl, StoreError, VisibilityMode};
use futures_util::stream::{self, Stream, StreamExt};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::broadcast;
use tower_http::services::ServeDir;

pub use events::{ApiEvent, EventBus, EventHub, EventType, BUFFER_SIZE};

/// Default number of rows returned by list endpoints.
pub const DEFAULT_LIMIT: usize = 200;

/// Every route the server answers, as (method, path).
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/api/projects"),
    ("GET", "/api/projects/{id}/state"),
    ("GET", "/api/projects/{id}/milestones"),
    ("GET", "/api/projects/{id}/issues"),
    ("POST", "/api/projects/{id}/issues"),
    ("GET", "/api/projects/{id}/reports"),
    ("GET", "/api/projects/{id}/metrics"),
    ("GET", "/api/projects/{id}/cost"),
    ("GET", "/api/projects/{id}/events"),
    ("POST", "/api/projects/{id}/bootstrap"),
    ("POST", "/api/projects/{id}/pause"),
    ("POST", "/api/projects/{id}/resume"),
    ("GET", "/"),
];

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown project {0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Store(StoreError::NoSuchIssue(_)) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({"error": self.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// A project as the server sees it. `control` is set while its loop runs
/// in this process.
#[derive(Debug, Clone)]
pub struct ProjectHandle {
    pub project: Project,
    pub control: Option<ProjectControl>,
}

#[derive(Clone)]
pub struct AppState {
    projects: Arc<BTreeMap<String, ProjectHandle>>,
    hub: Arc<EventHub>,
    clock: Arc<dyn Clock>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(projects: Vec<ProjectHandle>, hub: Arc<EventHub>, clock: Arc<dyn Clock>) -> Self {
        AppState {
            projects: Arc::new(projects.into_iter().map(|h| (h.project.id.clone(), h)).collect()),
            hub,
            clock,
            static_dir: None,
        }
    }

    /// Serve the dashboard bundle from `dir`.
    pub fn with_static_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.static_dir = Some(dir.into());
        self
    }

    pub fn hub(&self) -> &Arc<EventHub> {
        &self.hub
    }

    fn handle(&self, id: &str) -> ApiResult<&ProjectHandle> {
        self.projects.get(id).ok_or_else(|| ApiError::NotFound(id.to_string()))
    }
}

fn load_state(project: &Project) -> ApiResult<OrchestrationState> {
    match project.store.load_state() {
        Ok(s) => Ok(s),
        Err(StoreError::NoSnapshot) => Ok(OrchestrationState::fresh(&project.id)),
        Err(e) => Err(e.into()),
    }
}

fn ledger(project: &Project) -> ApiResult<CostLedger> {
    CostLedger::from_entries(project.store.cost_entries()?)
        .map_err(|e| ApiError::Store(StoreError::Corrupt(e.to_string())))
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.static_dir.clone();
    let api = Router::new()
        .route("/api/projects", get(list_projects))
        .route("/api/projects/{id}/state", get(get_state))
        .route("/api/projects/{id}/milestones", get(get_milestones))
        .route("/api/projects/{id}/issues", get(get_issues).post(post_issue))
        .route("/api/projects/{id}/reports", get(get_reports))
        .route("/api/projects/{id}/metrics", get(get_metrics))
        .route("/api/projects/{id}/cost", get(get_cost))
        .route("/api/projects/{id}/events", get(get_events))
        .route("/api/projects/{id}/bootstrap", post(post_bootstrap))
        .route("/api/projects/{id}/pause", post(post_pause))
        .route("/api/projects/{id}/resume", post(post_resume))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    }
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ApiError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ApiError::BindFailure { addr, source })
}

/// Runs until `shutdown` resolves, then lets in-flight responses finish.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn placeholder() -> Html<&'static str> {
    Html("<!doctype html><title>botforge</title><p>Dashboard bundle not configured. The API lives under <code>/api</code>.</p>")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub id: String,
    pub goal: String,
    pub phase: Phase,
    pub milestone: Option<Milestone>,
    pub cycle: u32,
    pub cycle_budget: Option<u32>,
    pub rolling_spend: Decimal,
    pub daily_limit_usd: Decimal,
    pub paused: bool,
}

fn summary(h: &ProjectHandle, clock: &dyn Clock) -> ApiResult<ProjectSummary> {
    let state = load_state(&h.project)?;
    let spend = ledger(&h.project)?.rolling_spend(clock.now());
    Ok(ProjectSummary {
        id: h.project.id.clone(),
        goal: h.project.spec.goal.clone(),
        phase: state.phase,
        cycle_budget: state.current_milestone.as_ref().map(|m| m.budget_remaining),
        milestone: state.current_milestone,
        cycle: state.cycle,
        rolling_spend: spend,
        daily_limit_usd: h.project.spec.budget.daily_limit_usd,
        paused: state.paused,
    })
}

async fn list_projects(State(app): State<AppState>) -> ApiResult<Json<Vec<ProjectSummary>>> {
    let list = app
        .projects
        .values()
        .map(|h| summary(h, app.clock.as_ref()))
        .collect::<ApiResult<_>>()?;
    Ok(Json(list))
}

async fn get_state(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<OrchestrationState>> {
    Ok(Json(load_state(&app.handle(&id)?.project)?))
}

async fn get_milestones(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(app.handle(&id)?.project.store.milestones()?))
}

#[derive(Debug, Deserialize)]
struct IssueQuery {
    status: Option<String>,
    assignee: Option<String>,
    limit: Option<usize>,
}

async fn get_issues(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<IssueQuery>,
) -> ApiResult<impl IntoResponse> {
    let status = match q.status.as_deref() {
        None | Some("all") => None,
        Some(s) => Some(s.parse::<IssueStatus>().map_err(ApiError::BadRequest)?),
    };
    let filter = IssueFilter {
        status,
        assignee: q.assignee,
        limit: Some(q.limit.unwrap_or(DEFAULT_LIMIT)),
    };
    Ok(Json(app.handle(&id)?.project.store.list_issues(&filter, &VisibilityMode::Full)?))
}

#[derive(Debug, Deserialize)]
pub struct NewIssue {
    pub title: String,
    #[serde(default)]
    pub body: String,
    pub assignee: Option<String>,
}

async fn post_issue(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<NewIssue>,
) -> ApiResult<impl IntoResponse> {
    let h = app.handle(&id)?;
    if req.title.trim().is_empty() {
        return Err(ApiError::BadRequest("title must not be empty".into()));
    }
    let issue = h
        .project
        .store
        .open_issue(&req.title, &req.body, "human", req.assignee.as_deref(), app.clock.now())?;
    Ok((StatusCode::CREATED, Json(issue)))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    agent: Option<String>,
    limit: Option<usize>,
}

async fn get_reports(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<impl IntoResponse> {
    let store = &app.handle(&id)?.project.store;
    Ok(Json(store.list_reports(q.agent.as_deref(), Some(q.limit.unwrap_or(DEFAULT_LIMIT)))?))
}

async fn get_metrics(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let project = &app.handle(&id)?.project;
    let state = load_state(project)?;
    let passed = project
        .store
        .milestones()?
        .iter()
        .filter(|r| r.milestone.status == MilestoneStatus::Passed)
        .count() as u64;
    Ok(Json(compute_metrics(
        state.total_cycles,
        state.failed_cycles,
        passed,
        &ledger(project)?,
    )))
}

#[derive(Debug, Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn get_cost(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(page): Query<Page>,
) -> ApiResult<impl IntoResponse> {
    let project = &app.handle(&id)?.project;
    let ledger = ledger(project)?;
    let entries: Vec<_> = ledger
        .entries()
        .iter()
        .skip(page.offset.unwrap_or(0))
        .take(page.limit.unwrap_or(DEFAULT_LIMIT))
        .collect();
    Ok(Json(json!({
        "daily_limit_usd": project.spec.budget.daily_limit_usd,
        "rolling_spend": ledger.rolling_spend(app.clock.now()),
        "total": ledger.total(),
        "count": ledger.entries().len(),
        "entries": entries,
    })))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    last_event_id: Option<u64>,
}

async fn get_events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    app.handle(&id)?;
    let last = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(q.last_event_id);
    let (backlog, rx) = app.hub.bus(&id).subscribe(last);
    Ok(Sse::new(event_stream(backlog, rx)).keep_alive(KeepAlive::default()))
}

fn sse_event(e: &ApiEvent) -> Event {
    Event::default()
        .event(e.event_type.as_str())
        .id(e.seq.to_string())
        .data(serde_json::to_string(&e.payload).unwrap_or_default())
}

/// Backlog first, then live events. A client that falls a full buffer
/// behind is disconnected and resumes with `Last-Event-ID`.
fn event_stream(
    backlog: Vec<ApiEvent>,
    rx: broadcast::Receiver<ApiEvent>,
) -> impl Stream<Item = Result<Event, Infallible>> {
    let after = backlog.last().map(|e| e.seq).unwrap_or(0);
    let live = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(e) => return Some((e, rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!("dropping stream client {n} events behind");
                    return None;
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
    .filter(move |e| std::future::ready(e.seq > after));
    stream::iter(backlog).chain(live).map(|e| Ok(sse_event(&e)))
}

async fn post_bootstrap(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let h = app.handle(&id)?;
    match &h.control {
        Some(control) => {
            control.bootstrap();
        }
        None => {
            let project = h.project.clone();
            let hub = app.hub.clone();
            let now = app.clock.now();
            tokio::spawn(async move {
                match bootstrap_offline(&project.store, &project.id, now) {
                    Ok(events) => {
                        for e in &events {
                            hub.publish_lifecycle(&project.id, e);
                        }
                    }
                    Err(e) => tracing::error!(project = %project.id, "bootstrap failed: {e}"),
                }
            });
        }
    }
    Ok((StatusCode::ACCEPTED, Json(json!({"accepted": true}))))
}

async fn set_paused(app: &AppState, id: &str, paused: bool) -> ApiResult<Json<serde_json::Value>> {
    let h = app.handle(id)?;
    match &h.control {
        Some(control) if paused => control.pause(),
        Some(control) => control.resume(),
        None => {
            let mut state = load_state(&h.project)?;
            if state.paused != paused {
                state.paused = paused;
                commit(&h.project.store, &[], &state, app.clock.now(), |_| Ok(()))?;
                app.hub.paused_changed(id, paused);
            }
        }
    }
    Ok(Json(json!({"paused": paused})))
}

async fn post_pause(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    set_paused(&app, &id, true).await
}

async fn post_resume(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    set_paused(&app, &id, false).await
}
