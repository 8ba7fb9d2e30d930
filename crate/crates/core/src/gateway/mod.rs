//! The single choke point between request sources (API handlers, the poller)
//! and the cluster.
//!
//! [`Gateway::handle`] validates a request, asks the per-principal
//! [`RateLimiter`] for admission, and then either dispatches it (render,
//! execute, parse, update the archive, refresh the cache), answers from the
//! [`ResponseCache`] for read-only requests, or rejects it with a retry delay.

pub mod cache;
pub mod limiter;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheEntry, CacheKey, ResponseCache};
pub use limiter::{LimiterConfig, RateLimiter, ThrottleState, Verdict};

use crate::adapter::{
    AccountingRecord, AdapterError, CommandRequest, JobDetail, JobStatus, JobSummary, SchedulerAdapter, SubmitSpec,
};
use crate::command::{CommandLine, ExecResult};
use crate::connection::{classify_read_failure, ConnectionError, ConnectionManager, KeyId};
use crate::duration::format_hms;
use crate::store::{JobRecord, JobStore, StoreError};

/// Principal used for background polling. The leading `@` keeps it apart from
/// any cluster user name.
pub const SYSTEM_PRINCIPAL: &str = "@system";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Status,
    StatusDetail,
    Cancel,
    Submit,
    Output,
    Refresh,
    Accounting,
}

impl RequestKind {
    /// Read-only kinds that may be answered from the cache when throttled.
    pub fn cacheable(self) -> bool {
        matches!(self, RequestKind::Status | RequestKind::StatusDetail | RequestKind::Output)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FileFetch {
    Whole { path: String },
    Tail { path: String, lines: usize },
}

impl FileFetch {
    pub fn path(&self) -> &str {
        match self {
            FileFetch::Whole { path } | FileFetch::Tail { path, .. } => path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum JobAction {
    /// Live listing, of one user's jobs or of everything visible.
    Status { user: Option<String> },
    StatusDetail { job_id: u64 },
    Cancel { job_id: u64 },
    Submit(SubmitSpec),
    /// Read files belonging to a job. Each file is one cluster command.
    Output { job_id: u64, files: Vec<FileFetch> },
    /// Uncached listing of one user's jobs.
    Refresh { user: String },
    Accounting { job_id: u64 },
}

impl JobAction {
    pub fn kind(&self) -> RequestKind {
        match self {
            JobAction::Status { .. } => RequestKind::Status,
            JobAction::StatusDetail { .. } => RequestKind::StatusDetail,
            JobAction::Cancel { .. } => RequestKind::Cancel,
            JobAction::Submit(_) => RequestKind::Submit,
            JobAction::Output { .. } => RequestKind::Output,
            JobAction::Refresh { .. } => RequestKind::Refresh,
            JobAction::Accounting { .. } => RequestKind::Accounting,
        }
    }

    /// Number of cluster commands this action sends.
    pub fn cost(&self) -> u32 {
        match self {
            JobAction::Output { files, .. } => files.len() as u32,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            JobAction::StatusDetail { job_id }
            | JobAction::Cancel { job_id }
            | JobAction::Accounting { job_id }
            | JobAction::Output { job_id, .. }
                if *job_id == 0 =>
            {
                Err("job id must be positive".into())
            }
            JobAction::Submit(spec) => spec.validate().map_err(|e| e.to_string()),
            JobAction::Output { files, .. } if files.is_empty() => Err("no files requested".into()),
            JobAction::Output { files, .. } => files.iter().try_for_each(|f| match f {
                FileFetch::Tail { lines: 0, .. } => Err("tail needs at least one line".to_string()),
                f if f.path().is_empty() || f.path().contains(['\n', '\0']) => Err("bad file path".to_string()),
                _ => Ok(()),
            }),
            JobAction::Refresh { user } if user.is_empty() => Err("user must not be empty".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobRequest {
    pub principal: String,
    pub action: JobAction,
    pub issued_at: DateTime<Utc>,
}

impl JobRequest {
    pub fn new(principal: impl Into<String>, action: JobAction, issued_at: DateTime<Utc>) -> Self {
        Self {
            principal: principal.into(),
            action,
            issued_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FileContent {
    pub path: String,
    pub content: Option<String>,
    /// Set when the file could not be read, e.g. it does not exist yet.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum GatewayResponse {
    Jobs { jobs: Vec<JobSummary> },
    Detail { detail: JobDetail },
    #[serde(rename_all = "camelCase")]
    Submitted { job_id: u64, record: JobRecord },
    #[serde(rename_all = "camelCase")]
    Cancelled { job_id: u64, message: String },
    Files { files: Vec<FileContent> },
    Accounting { record: AccountingRecord },
    #[serde(rename_all = "camelCase")]
    AccountingPending { job_id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Render,
    Transport,
    Parse,
    Store,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("{stage} stage failed: {message}")]
pub struct DispatchError {
    pub stage: Stage,
    pub message: String,
}

impl DispatchError {
    fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("too many requests; retry in {} ms", retry_after.num_milliseconds())]
    Throttled { retry_after: TimeDelta },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("no cluster credential is bound to {0}")]
    NoCredential(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmitDecision {
    Admit,
    ServeFromCache(CacheEntry),
    Reject { retry_after: TimeDelta },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Served {
    Fresh(Arc<GatewayResponse>),
    Cached(CacheEntry),
}

impl Served {
    pub fn response(&self) -> &Arc<GatewayResponse> {
        match self {
            Served::Fresh(r) => r,
            Served::Cached(e) => &e.value,
        }
    }

    pub fn cached_at(&self) -> Option<DateTime<Utc>> {
        match self {
            Served::Fresh(_) => None,
            Served::Cached(e) => Some(e.stored_at),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub limiter: LimiterConfig,
    /// Separate budget for [`SYSTEM_PRINCIPAL`].
    pub system_limiter: LimiterConfig,
    pub cache_ttl: TimeDelta,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            limiter: LimiterConfig::default(),
            system_limiter: LimiterConfig {
                threshold: 200,
                ..LimiterConfig::default()
            },
            cache_ttl: TimeDelta::seconds(60),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PrincipalMetrics {
    pub admits: u64,
    pub cache_serves: u64,
    pub rejects: u64,
}

pub struct Gateway {
    adapter: Arc<dyn SchedulerAdapter>,
    conn: Arc<ConnectionManager>,
    store: Arc<JobStore>,
    limiter: RateLimiter,
    cache: ResponseCache,
    bindings: RwLock<HashMap<String, KeyId>>,
    default_key: RwLock<Option<KeyId>>,
    metrics: Mutex<BTreeMap<String, PrincipalMetrics>>,
}

impl Gateway {
    pub fn new(
        adapter: Arc<dyn SchedulerAdapter>,
        conn: Arc<ConnectionManager>,
        store: Arc<JobStore>,
        config: GatewayConfig,
    ) -> Self {
        Self {
            adapter,
            conn,
            store,
            limiter: RateLimiter::new(config.limiter).with_override(SYSTEM_PRINCIPAL, config.system_limiter),
            cache: ResponseCache::new(config.cache_ttl),
            bindings: RwLock::new(HashMap::new()),
            default_key: RwLock::new(None),
            metrics: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn adapter(&self) -> &Arc<dyn SchedulerAdapter> {
        &self.adapter
    }

    pub fn connections(&self) -> &Arc<ConnectionManager> {
        &self.conn
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.store
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Run `principal`'s requests with this credential.
    pub fn bind_credential(&self, principal: impl Into<String>, key: KeyId) {
        self.bindings.write().insert(principal.into(), key);
    }

    /// Credential for principals without their own binding.
    pub fn set_default_credential(&self, key: Option<KeyId>) {
        *self.default_key.write() = key;
    }

    pub fn credential_for(&self, principal: &str) -> Result<KeyId, GatewayError> {
        self.bindings
            .read()
            .get(principal)
            .cloned()
            .or_else(|| self.default_key.read().clone())
            .ok_or_else(|| GatewayError::NoCredential(principal.to_string()))
    }

    pub fn metrics(&self) -> BTreeMap<String, PrincipalMetrics> {
        self.metrics.lock().clone()
    }

    pub fn cache_lookup(&self, key: &CacheKey, now: DateTime<Utc>) -> Option<CacheEntry> {
        self.cache.lookup(key, now)
    }

    /// Admission decision. An admitted request is counted against the
    /// principal's budget, so it must then be dispatched.
    pub fn admit(&self, request: &JobRequest, now: DateTime<Utc>) -> AdmitDecision {
        let decision = match self.limiter.check(&request.principal, request.action.cost(), now) {
            Verdict::Admit => AdmitDecision::Admit,
            Verdict::Violation { retry_after, .. } => {
                let cached = request
                    .action
                    .kind()
                    .cacheable()
                    .then(|| self.cache.lookup(&CacheKey::for_action(&request.principal, &request.action), now))
                    .flatten();
                match cached {
                    Some(entry) => AdmitDecision::ServeFromCache(entry),
                    None => AdmitDecision::Reject { retry_after },
                }
            }
        };
        let mut metrics = self.metrics.lock();
        let m = metrics.entry(request.principal.clone()).or_default();
        match decision {
            AdmitDecision::Admit => m.admits += 1,
            AdmitDecision::ServeFromCache(_) => m.cache_serves += 1,
            AdmitDecision::Reject { .. } => m.rejects += 1,
        }
        decision
    }

    /// Validate, admit, then dispatch or answer from cache. Admission time is
    /// the request's `issued_at`.
    pub async fn handle(&self, request: JobRequest) -> Result<Served, GatewayError> {
        if request.principal.is_empty() {
            return Err(DispatchError::new(Stage::Render, "principal must not be empty").into());
        }
        request
            .action
            .validate()
            .map_err(|m| DispatchError::new(Stage::Render, m))?;
        self.credential_for(&request.principal)?;
        match self.admit(&request, request.issued_at) {
            AdmitDecision::Admit => {
                let response = Arc::new(self.dispatch(&request).await?);
                if request.action.kind().cacheable() {
                    let key = CacheKey::for_action(&request.principal, &request.action);
                    self.cache.insert(key, response.clone(), request.issued_at);
                }
                Ok(Served::Fresh(response))
            }
            AdmitDecision::ServeFromCache(entry) => Ok(Served::Cached(entry)),
            AdmitDecision::Reject { retry_after } => Err(GatewayError::Throttled { retry_after }),
        }
    }

    /// Carry out an admitted request.
    pub async fn dispatch(&self, request: &JobRequest) -> Result<GatewayResponse, GatewayError> {
        let key = self.credential_for(&request.principal)?;
        match &request.action {
            JobAction::Status { user } => {
                let req = match user {
                    Some(user) => CommandRequest::ListForUser { user: user.clone() },
                    None => CommandRequest::List,
                };
                self.listing(&key, &req).await
            }
            JobAction::Refresh { user } => {
                self.listing(&key, &CommandRequest::ListForUser { user: user.clone() }).await
            }
            JobAction::StatusDetail { job_id } => {
                let out = self.run(&key, &CommandRequest::Detail { job_id: *job_id }).await?;
                let detail = self.adapter.parse_job_detail(&out.stdout).map_err(parse_error)?;
                self.absorb_detail(&detail)?;
                Ok(GatewayResponse::Detail { detail })
            }
            JobAction::Cancel { job_id } => {
                let out = self.run(&key, &CommandRequest::Cancel { job_id: *job_id }).await?;
                match self.store.mark_status(*job_id, JobStatus::Deleted) {
                    Ok(_) | Err(StoreError::AlreadyFinal(_)) => {}
                    // Cancelled before any listing saw it; archive it so the
                    // poller still collects its accounting.
                    Err(StoreError::NotFound(_)) => {
                        let owner = self
                            .conn
                            .credential_info(&key)
                            .map_err(|e| DispatchError::new(Stage::Transport, e))?
                            .user;
                        let record = JobRecord::new(*job_id, "", owner, JobStatus::Deleted);
                        self.store.upsert_job(&record).map_err(store_error)?;
                    }
                    Err(e) => return Err(store_error(e)),
                }
                Ok(GatewayResponse::Cancelled {
                    job_id: *job_id,
                    message: out.stdout.trim().to_string(),
                })
            }
            JobAction::Submit(spec) => self.submit(&key, spec).await,
            JobAction::Output { files, .. } => {
                let mut out = Vec::with_capacity(files.len());
                for file in files {
                    out.push(self.fetch(&key, file).await?);
                }
                Ok(GatewayResponse::Files { files: out })
            }
            JobAction::Accounting { job_id } => {
                let cmd = self.render(&CommandRequest::Accounting { job_id: *job_id })?;
                let result = self.exec(&key, &cmd).await?;
                match self.adapter.interpret_accounting(&result) {
                    Ok(record) => Ok(GatewayResponse::Accounting { record }),
                    Err(AdapterError::NotFinished) => Ok(GatewayResponse::AccountingPending { job_id: *job_id }),
                    Err(e) => Err(parse_error(e)),
                }
            }
        }
    }

    fn render(&self, request: &CommandRequest) -> Result<CommandLine, GatewayError> {
        self.adapter
            .render_command(request)
            .map_err(|e| DispatchError::new(Stage::Render, e).into())
    }

    async fn exec(&self, key: &KeyId, cmd: &CommandLine) -> Result<ExecResult, GatewayError> {
        self.conn
            .execute(key, cmd)
            .await
            .map_err(|e| DispatchError::new(Stage::Transport, e).into())
    }

    /// Render and execute; a nonzero exit is a transport-stage failure.
    async fn run(&self, key: &KeyId, request: &CommandRequest) -> Result<ExecResult, GatewayError> {
        let cmd = self.render(request)?;
        let out = self.exec(key, &cmd).await?;
        if !out.is_success() {
            return Err(DispatchError::new(
                Stage::Transport,
                format!("`{}` exited with {}: {}", cmd.program().unwrap_or(""), out.exit_code, out.stderr.trim()),
            )
            .into());
        }
        Ok(out)
    }

    async fn listing(&self, key: &KeyId, request: &CommandRequest) -> Result<GatewayResponse, GatewayError> {
        let out = self.run(key, request).await?;
        let jobs = self.adapter.parse_job_list(&out.stdout).map_err(parse_error)?;
        self.absorb_listing(&jobs)?;
        Ok(GatewayResponse::Jobs { jobs })
    }

    async fn submit(&self, key: &KeyId, spec: &SubmitSpec) -> Result<GatewayResponse, GatewayError> {
        let cmd = self.render(&CommandRequest::Submit(spec.clone()))?;
        let out = self.exec(key, &cmd).await?;
        if !out.is_success() {
            return Err(DispatchError::new(
                Stage::Transport,
                format!("submit exited with {}: {}", out.exit_code, out.stderr.trim()),
            )
            .into());
        }
        let job_id = self.adapter.parse_submit(&out.stdout).map_err(parse_error)?;
        let owner = self
            .conn
            .credential_info(key)
            .map_err(|e| DispatchError::new(Stage::Transport, e))?
            .user;
        let mut record = JobRecord::new(job_id, &spec.job_name, owner, JobStatus::Queued);
        record.path.clone_from(&spec.script_path);
        record.command = cmd.to_shell_string();
        record.source_directory.clone_from(&spec.source_directory);
        record.outpath = spec
            .output_path
            .clone()
            .unwrap_or_else(|| self.adapter.default_output_path(spec, job_id));
        record.memory_requested.clone_from(&spec.memory_requested);
        record.parallel = spec.parallel;
        record.cores = spec.cores;
        let stored = self.store.upsert_job(&record).map_err(store_error)?.record;
        self.store
            .set_error_path(job_id, &self.adapter.default_error_path(spec, job_id))
            .map_err(store_error)?;
        Ok(GatewayResponse::Submitted { job_id, record: stored })
    }

    async fn fetch(&self, key: &KeyId, file: &FileFetch) -> Result<FileContent, GatewayError> {
        let cmd = match file {
            FileFetch::Whole { path } => CommandLine::new(["cat", "--", path]),
            FileFetch::Tail { path, lines } => {
                CommandLine::new(["tail".to_string(), "-n".into(), lines.to_string(), "--".into(), path.clone()])
            }
        };
        let result = self.exec(key, &cmd).await?;
        let path = file.path().to_string();
        if result.is_success() {
            return Ok(FileContent {
                path,
                content: Some(result.stdout),
                error: None,
            });
        }
        match classify_read_failure(&path, &result) {
            e @ (ConnectionError::FileNotFound(_) | ConnectionError::PermissionDenied(_)) => Ok(FileContent {
                path,
                content: None,
                error: Some(e.to_string()),
            }),
            e => Err(DispatchError::new(Stage::Transport, e).into()),
        }
    }

    fn absorb_listing(&self, jobs: &[JobSummary]) -> Result<(), GatewayError> {
        for job in jobs {
            let mut record = match self.store.get_job(job.job_id) {
                Ok(r) if r.is_final() => continue,
                Ok(r) => r,
                Err(StoreError::NotFound(_)) => {
                    let mut r = JobRecord::new(job.job_id, "", "", job.status);
                    r.cores = job.slots;
                    r.parallel = job.slots > 1;
                    r
                }
                Err(e) => return Err(store_error(e)),
            };
            record.job_name.clone_from(&job.job_name);
            record.user.clone_from(&job.user);
            record.status = job.status;
            record.cluster_node = job.node().to_string();
            match self.store.upsert_job(&record) {
                Ok(_) | Err(StoreError::AlreadyFinal(_)) => {}
                Err(StoreError::ConstraintViolation(m)) => {
                    tracing::warn!(job_id = job.job_id, "listing row not archived: {m}");
                }
                Err(e) => return Err(store_error(e)),
            }
        }
        Ok(())
    }

    fn absorb_detail(&self, d: &JobDetail) -> Result<(), GatewayError> {
        let mut record = match self.store.get_job(d.job_id) {
            Ok(r) if r.is_final() => return Ok(()),
            Ok(r) => r,
            Err(StoreError::NotFound(_)) => {
                let status = if d.time_remaining_secs.is_some() { JobStatus::Running } else { JobStatus::Queued };
                JobRecord::new(d.job_id, "", "", status)
            }
            Err(e) => return Err(store_error(e)),
        };
        record.job_name.clone_from(&d.job_name);
        record.user.clone_from(&d.owner);
        record.path.clone_from(&d.script_path);
        record.command.clone_from(&d.submit_command);
        record.source_directory.clone_from(&d.source_directory);
        record.outpath.clone_from(&d.output_path);
        record.memory_requested.clone_from(&d.memory_requested);
        record.parallel = d.parallel;
        record.cores = d.cores;
        record.run_time = format_hms(d.run_time_secs);
        record.time_remaining = d.time_remaining_secs.map(format_hms).unwrap_or_default();
        record.current_memory = d.current_memory;
        record.maximum_memory = d.maximum_memory;
        match self.store.upsert_job(&record) {
            Ok(_) | Err(StoreError::AlreadyFinal(_)) => {}
            Err(e) => return Err(store_error(e)),
        }
        if !d.error_path.is_empty() {
            self.store.set_error_path(d.job_id, &d.error_path).map_err(store_error)?;
        }
        Ok(())
    }
}

fn parse_error(e: AdapterError) -> GatewayError {
    DispatchError::new(Stage::Parse, e).into()
}

fn store_error(e: StoreError) -> GatewayError {
    DispatchError::new(Stage::Store, e).into()
}
