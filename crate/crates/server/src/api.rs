//! Routes.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /auth/login` | exchange credentials for a session |
//! | `POST /auth/logout` | end the session |
//! | `GET /jobs?user=&status=` | archived jobs, refreshed from a live listing |
//! | `POST /jobs` | submit |
//! | `POST /jobs/refresh` | re-poll the caller's own jobs |
//! | `GET /jobs/{id}` | record plus live scheduler detail |
//! | `DELETE /jobs/{id}` | cancel |
//! | `GET /jobs/{id}/output?lines=N` | script, output tail and log findings |
//! | `GET /jobs/{id}/logs` | log findings only |
//! | `GET /predict?tool=&reads=&metric=` | resource estimate from the archive |
//! | `GET /diagnostics` | poller and gateway state (admins only) |
//!
//! Sessions travel as `Authorization: Bearer <token>`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use jobwatch_core::analytics::{build_models, parse_number, Metric, TagRule};
use jobwatch_core::clock::Clock;
use jobwatch_core::connection::KeyId;
use jobwatch_core::gateway::{FileContent, FileFetch, Gateway, GatewayResponse, JobAction, JobRequest, Served};
use jobwatch_core::poller::Poller;
use jobwatch_core::stack::{SimStack, Stack};
use jobwatch_core::store::{HistoryQuery, JobRecord, JobStore};
use jobwatch_core::{JobStatus, SubmitSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth::{Authenticator, Credentials, Session, SessionStore};
use crate::detail::{scan_log, LogFinding};
use crate::error::{ApiError, ErrorStage};

pub const DEFAULT_TAIL_LINES: usize = 20;
pub const MAX_TAIL_LINES: usize = 10_000;

/// How cluster credentials are obtained at login.
pub enum Backend {
    /// Each principal gets a simulated key on first login.
    Sim(Arc<SimStack>),
    /// Principals unlock a stored key by passing `keyId` and `keyPassphrase`.
    Cluster,
}

pub struct AnalyticsSettings {
    pub rules: Vec<TagRule>,
    pub group_key: String,
    pub covariate: String,
}

impl Default for AnalyticsSettings {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            group_key: "tool".into(),
            covariate: "reads".into(),
        }
    }
}

pub struct AppState {
    pub gateway: Arc<Gateway>,
    pub poller: Arc<Poller>,
    pub store: Arc<JobStore>,
    pub clock: Arc<dyn Clock>,
    pub sessions: SessionStore,
    pub auth: Authenticator,
    pub admins: BTreeSet<String>,
    pub analytics: AnalyticsSettings,
    pub backend: Backend,
}

impl AppState {
    pub fn new(stack: &Stack, clock: Arc<dyn Clock>, backend: Backend, auth: Authenticator, sessions: SessionStore) -> Self {
        Self {
            gateway: stack.gateway.clone(),
            poller: stack.poller.clone(),
            store: stack.store.clone(),
            clock,
            sessions,
            auth,
            admins: BTreeSet::new(),
            analytics: AnalyticsSettings::default(),
            backend,
        }
    }

    pub fn for_sim(sim: Arc<SimStack>, auth: Authenticator, sessions: SessionStore) -> Self {
        let clock = Arc::new(sim.clock.clone());
        Self::new(&sim.stack, clock, Backend::Sim(sim.clone()), auth, sessions)
    }

    pub fn with_admins(mut self, admins: impl IntoIterator<Item = String>) -> Self {
        self.admins = admins.into_iter().collect();
        self
    }

    pub fn with_analytics(mut self, analytics: AnalyticsSettings) -> Self {
        self.analytics = analytics;
        self
    }

    fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    async fn request(&self, session: &Session, action: JobAction) -> Result<Served, ApiError> {
        let request = JobRequest::new(session.principal.clone(), action, self.now());
        Ok(self.gateway.handle(request).await?)
    }

    /// The archived record, if the session may see it.
    fn visible_record(&self, session: &Session, job_id: u64) -> Result<JobRecord, ApiError> {
        let record = self.store.get_job(job_id)?;
        if !session.admin && record.user != session.principal {
            return Err(ApiError::forbidden(format!("job {job_id} belongs to another user")));
        }
        Ok(record)
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/auth/login", post(login))
        .route("/auth/logout", post(logout))
        .route("/jobs", get(list_jobs).post(submit_job))
        .route("/jobs/refresh", post(refresh))
        .route("/jobs/{id}", get(job_status).delete(cancel_job))
        .route("/jobs/{id}/output", get(job_output))
        .route("/jobs/{id}/logs", get(job_logs))
        .route("/predict", get(predict))
        .route("/diagnostics", get(diagnostics))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// A valid session taken from the `Authorization` header.
pub struct Authed(pub Session);

impl FromRequestParts<Shared> for Authed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or(crate::auth::AuthError::MissingSession)?;
        Ok(Authed(state.sessions.validate(token, state.now())?))
    }
}

fn job_id(path: Result<Path<u64>, PathRejection>) -> Result<u64, ApiError> {
    path.map(|Path(id)| id)
        .map_err(|e| ApiError::bad_request(format!("invalid job id: {e}")))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LoginRequest {
    #[serde(flatten)]
    pub credentials: Credentials,
    pub key_id: Option<String>,
    pub key_passphrase: Option<String>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LoginResponse {
    #[serde(flatten)]
    pub session: Session,
    /// Whether a cluster credential is bound to the principal.
    pub key_bound: bool,
}

async fn login(
    State(state): State<Shared>,
    req: Result<Json<LoginRequest>, JsonRejection>,
) -> Result<Json<LoginResponse>, ApiError> {
    let req = body(req)?;
    let now = state.now();
    let principal = state.auth.authenticate(&req.credentials, now)?;
    let admin = state.admins.contains(&principal);
    match &state.backend {
        Backend::Sim(sim) => {
            let sim = sim.clone();
            let user = principal.clone();
            // Key derivation is deliberately slow.
            tokio::task::spawn_blocking(move || sim.add_user(&user))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorStage::Auth, e.to_string()))?
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorStage::Auth, e.to_string()))?;
        }
        Backend::Cluster => {
            if let Some(id) = &req.key_id {
                let passphrase = req.key_passphrase.clone().unwrap_or_default();
                let conn = state.gateway.connections().clone();
                let key = KeyId(id.clone());
                let unlock_key = key.clone();
                let info = tokio::task::spawn_blocking(move || conn.unlock(&unlock_key, &passphrase))
                    .await
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorStage::Auth, e.to_string()))?
                    .map_err(|e| ApiError::new(StatusCode::UNAUTHORIZED, ErrorStage::Auth, e.to_string()))?;
                if info.user != principal && !admin {
                    return Err(ApiError::forbidden(format!(
                        "key {id} belongs to cluster user {}",
                        info.user
                    )));
                }
                state.gateway.bind_credential(principal.clone(), key);
            }
        }
    }
    let key_bound = state.gateway.credential_for(&principal).is_ok();
    let session = state.sessions.issue(&principal, admin, now);
    tracing::info!(principal = %session.principal, admin, key_bound, "login");
    Ok(Json(LoginResponse { session, key_bound }))
}

async fn logout(Authed(session): Authed, State(state): State<Shared>) -> StatusCode {
    state.sessions.revoke(&session.token);
    StatusCode::NO_CONTENT
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListQuery {
    pub user: Option<String>,
    /// Comma-separated status names or integer codes.
    pub status: Option<String>,
}

fn parse_statuses(text: &str) -> Result<BTreeSet<JobStatus>, ApiError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<i64>()
                .ok()
                .and_then(JobStatus::from_code)
                .or_else(|| JobStatus::ALL.into_iter().find(|st| st.name().eq_ignore_ascii_case(s)))
                .ok_or_else(|| ApiError::bad_request(format!("unknown status `{s}`")))
        })
        .collect()
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobList {
    pub jobs: Vec<JobRecord>,
    /// Set when the live listing came from the cache.
    pub cached_at: Option<DateTime<Utc>>,
}

async fn list_jobs(
    Authed(session): Authed,
    State(state): State<Shared>,
    q: Result<Query<ListQuery>, QueryRejection>,
) -> Result<Json<JobList>, ApiError> {
    let q = query(q)?;
    let user = match (session.admin, q.user) {
        (true, user) => user,
        (false, Some(u)) if u != session.principal => {
            return Err(ApiError::forbidden("only administrators may list other users' jobs"));
        }
        (false, _) => Some(session.principal.clone()),
    };
    let statuses = q.status.as_deref().map(parse_statuses).transpose()?;
    let served = state.request(&session, JobAction::Status { user: user.clone() }).await?;
    let mut history = match &user {
        Some(u) => HistoryQuery::for_user(u.clone()),
        None => HistoryQuery::all(),
    };
    history.status_in = statuses;
    let jobs = state.store.list_jobs(&history)?;
    Ok(Json(JobList {
        jobs,
        cached_at: served.cached_at(),
    }))
}

async fn submit_job(
    Authed(session): Authed,
    State(state): State<Shared>,
    spec: Result<Json<SubmitSpec>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let spec = body(spec)?;
    let served = state.request(&session, JobAction::Submit(spec)).await?;
    match served.response().as_ref() {
        GatewayResponse::Submitted { job_id, record } => Ok((
            StatusCode::CREATED,
            Json(json!({ "jobId": job_id, "record": record })),
        )),
        other => Err(unexpected(other)),
    }
}

fn unexpected(response: &GatewayResponse) -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        ErrorStage::Gateway,
        format!("unexpected gateway response {response:?}"),
    )
}

async fn refresh(Authed(session): Authed, State(state): State<Shared>) -> Json<Value> {
    let report = state.poller.refresh_user(&session.principal, state.now()).await;
    Json(json!(report))
}

async fn job_status(
    Authed(session): Authed,
    State(state): State<Shared>,
    id: Result<Path<u64>, PathRejection>,
) -> Result<Json<Value>, ApiError> {
    let id = job_id(id)?;
    let record = state.visible_record(&session, id)?;
    if record.is_final() {
        return Ok(Json(json!({ "record": record, "detail": null, "cachedAt": null })));
    }
    // A job that just left the scheduler fails here at the transport stage;
    // the archive still has its record.
    let (detail, cached_at, detail_error) = match state.request(&session, JobAction::StatusDetail { job_id: id }).await {
        Ok(served) => match served.response().as_ref() {
            GatewayResponse::Detail { detail } => (Some(detail.clone()), served.cached_at(), None),
            other => return Err(unexpected(other)),
        },
        Err(e) if e.status == StatusCode::BAD_GATEWAY => (None, None, Some(e.body())),
        Err(e) => return Err(e),
    };
    let record = state.store.get_job(id)?;
    Ok(Json(json!({
        "record": record,
        "detail": detail,
        "cachedAt": cached_at,
        "detailError": detail_error,
    })))
}

async fn cancel_job(
    Authed(session): Authed,
    State(state): State<Shared>,
    id: Result<Path<u64>, PathRejection>,
) -> Result<Json<Value>, ApiError> {
    let id = job_id(id)?;
    match state.visible_record(&session, id) {
        Ok(_) => {}
        // Administrators may cancel jobs the archive has not seen yet.
        Err(e) if e.status == StatusCode::NOT_FOUND && session.admin => {}
        Err(e) => return Err(e),
    }
    let served = state.request(&session, JobAction::Cancel { job_id: id }).await?;
    match served.response().as_ref() {
        GatewayResponse::Cancelled { job_id, message } => {
            let record = state.store.get_job(*job_id).ok();
            Ok(Json(json!({ "jobId": job_id, "message": message, "record": record })))
        }
        other => Err(unexpected(other)),
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputQuery {
    pub lines: usize,
}

impl Default for OutputQuery {
    fn default() -> Self {
        Self {
            lines: DEFAULT_TAIL_LINES,
        }
    }
}

/// What the detail screen shows for one job.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JobDetailView {
    pub record: JobRecord,
    pub script_name: String,
    pub source_directory: String,
    pub script_content: String,
    pub script_error: Option<String>,
    pub output_tail: Vec<String>,
    pub output_error: Option<String>,
    pub error_log_path: Option<String>,
    pub error_log_error: Option<String>,
    pub log_findings: Vec<LogFinding>,
    /// Oldest cache time among the file fetches, if any came from the cache.
    pub cached_at: Option<DateTime<Utc>>,
}

fn files_of(served: &Served) -> Result<Vec<FileContent>, ApiError> {
    match served.response().as_ref() {
        GatewayResponse::Files { files } => Ok(files.clone()),
        other => Err(unexpected(other)),
    }
}

fn oldest(a: Option<DateTime<Utc>>, b: Option<DateTime<Utc>>) -> Option<DateTime<Utc>> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

/// Record, script, output tail and error-log findings for one job, using at
/// most two gateway `Output` requests: one for the script and the output
/// tail, one for the error log.
pub async fn compose_job_detail(
    state: &AppState,
    session: &Session,
    job_id: u64,
    tail_lines: usize,
) -> Result<JobDetailView, ApiError> {
    if tail_lines == 0 || tail_lines > MAX_TAIL_LINES {
        return Err(ApiError::bad_request(format!(
            "lines must lie in 1..={MAX_TAIL_LINES}"
        )));
    }
    let record = state.visible_record(session, job_id)?;
    let mut view = JobDetailView {
        script_name: record.path.rsplit('/').next().unwrap_or_default().to_string(),
        source_directory: record.source_directory.clone(),
        record,
        script_content: String::new(),
        script_error: None,
        output_tail: Vec::new(),
        output_error: None,
        error_log_path: state.store.error_path(job_id)?,
        error_log_error: None,
        log_findings: Vec::new(),
        cached_at: None,
    };

    let mut files = Vec::new();
    if !view.record.path.is_empty() {
        files.push(FileFetch::Whole {
            path: view.record.path.clone(),
        });
    }
    if !view.record.outpath.is_empty() {
        files.push(FileFetch::Tail {
            path: view.record.outpath.clone(),
            lines: tail_lines,
        });
    }
    if !files.is_empty() {
        let served = state.request(session, JobAction::Output { job_id, files }).await?;
        view.cached_at = served.cached_at();
        for file in files_of(&served)? {
            if file.path == view.record.path {
                view.script_content = file.content.clone().unwrap_or_default();
                view.script_error = file.error.clone();
            }
            if file.path == view.record.outpath {
                let content = file.content.unwrap_or_default();
                let lines: Vec<&str> = content.lines().collect();
                view.output_tail = lines[lines.len().saturating_sub(tail_lines)..]
                    .iter()
                    .map(|l| l.to_string())
                    .collect();
                view.output_error = file.error;
            }
        }
    }

    if let Some(path) = view.error_log_path.clone() {
        let (findings, error, cached_at) = fetch_findings(state, session, job_id, path).await?;
        view.log_findings = findings;
        view.error_log_error = error;
        view.cached_at = oldest(view.cached_at, cached_at);
    }
    Ok(view)
}

async fn fetch_findings(
    state: &AppState,
    session: &Session,
    job_id: u64,
    path: String,
) -> Result<(Vec<LogFinding>, Option<String>, Option<DateTime<Utc>>), ApiError> {
    let served = state
        .request(session, JobAction::Output {
            job_id,
            files: vec![FileFetch::Whole { path }],
        })
        .await?;
    let file = files_of(&served)?.into_iter().next();
    let (content, error) = file.map_or((None, None), |f| (f.content, f.error));
    let findings = content.as_deref().map(scan_log).unwrap_or_default();
    Ok((findings, error, served.cached_at()))
}

async fn job_output(
    Authed(session): Authed,
    State(state): State<Shared>,
    id: Result<Path<u64>, PathRejection>,
    q: Result<Query<OutputQuery>, QueryRejection>,
) -> Result<Json<JobDetailView>, ApiError> {
    let id = job_id(id)?;
    let q = query(q)?;
    Ok(Json(compose_job_detail(&state, &session, id, q.lines).await?))
}

async fn job_logs(
    Authed(session): Authed,
    State(state): State<Shared>,
    id: Result<Path<u64>, PathRejection>,
) -> Result<Json<Value>, ApiError> {
    let id = job_id(id)?;
    state.visible_record(&session, id)?;
    let Some(path) = state.store.error_path(id)? else {
        return Ok(Json(json!({ "jobId": id, "path": null, "findings": [], "error": null, "cachedAt": null })));
    };
    let (findings, error, cached_at) = fetch_findings(&state, &session, id, path.clone()).await?;
    Ok(Json(json!({
        "jobId": id,
        "path": path,
        "findings": findings,
        "error": error,
        "cachedAt": cached_at,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictQuery {
    pub tool: String,
    /// Covariate value; `K`, `M` and `G` suffixes are accepted.
    pub reads: String,
    /// `elapsed` or `memory`. Both when absent.
    pub metric: Option<String>,
}

fn parse_metric(text: &str) -> Result<Metric, ApiError> {
    match text.to_ascii_lowercase().as_str() {
        "elapsed" | "elapsedseconds" | "time" => Ok(Metric::ElapsedSeconds),
        "memory" | "maxmemorybytes" | "mem" => Ok(Metric::MaxMemoryBytes),
        _ => Err(ApiError::bad_request(format!("unknown metric `{text}`"))),
    }
}

/// Reads only the archive, so it is not rate limited.
async fn predict(
    Authed(_session): Authed,
    State(state): State<Shared>,
    q: Result<Query<PredictQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let q = query(q)?;
    let covariate = parse_number(&q.reads).ok_or_else(|| ApiError::bad_request(format!("invalid reads `{}`", q.reads)))?;
    let metrics = match &q.metric {
        Some(m) => vec![parse_metric(m)?],
        None => Metric::ALL.to_vec(),
    };
    let a = &state.analytics;
    let models = build_models(&state.store, &a.rules, std::slice::from_ref(&a.group_key), &a.covariate)?;
    let group = format!("{}={}", a.group_key, q.tool);
    let mut estimates = Vec::new();
    for metric in metrics {
        let model = models.find(&group, metric).ok_or_else(|| {
            ApiError::from(jobwatch_core::analytics::AnalyticsError::UnfittedModel {
                group: group.clone(),
                metric,
            })
        })?;
        let estimate = model.predict(covariate);
        estimates.push(json!({
            "metric": metric,
            "value": estimate.value,
            "rmse": estimate.rmse,
            "slope": model.slope,
            "intercept": model.intercept,
            "n": model.n,
        }));
    }
    Ok(Json(json!({
        "group": group,
        "covariate": a.covariate,
        "covariateValue": covariate,
        "estimates": estimates,
    })))
}

async fn diagnostics(Authed(session): Authed, State(state): State<Shared>) -> Result<Json<Value>, ApiError> {
    if !session.admin {
        return Err(ApiError::forbidden("diagnostics are for administrators"));
    }
    let gw = &state.gateway;
    let retries: BTreeMap<u64, u32> = state.poller.pending_retries().into_iter().collect();
    Ok(Json(json!({
        "transport": gw.connections().transport_name(),
        "poll": state.poller.last_report(),
        "pendingRetries": retries,
        "metrics": gw.metrics(),
        "throttle": gw.limiter().states(),
        "cacheEntries": gw.cache().len(),
        "sessions": state.sessions.len(),
        "openJobs": state.store.open_job_ids(None)?.len(),
    })))
}
