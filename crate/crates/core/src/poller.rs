//! Background synchronization of the archive with the live cluster.
//!
//! Each tick lists every visible job once, then asks for details of the
//! active ones (at most `detail_batch_limit` per tick, rotating so every job
//! gets its turn). Jobs that are open in the archive but missing from the
//! listing have left the scheduler; their accounting record supplies the
//! final status. All traffic goes through the [`Gateway`] under
//! [`SYSTEM_PRINCIPAL`], except ad-hoc refreshes which run as the user.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::JobSummary;
use crate::clock::Clock;
use crate::gateway::{Gateway, GatewayError, GatewayResponse, JobAction, JobRequest, Served, SYSTEM_PRINCIPAL};
use crate::store::StoreError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PollConfig {
    pub interval_seconds: u64,
    pub detail_batch_limit: usize,
    /// Accounting attempts for a vanished job before it is closed as Unknown.
    pub retry_bound: u32,
    pub enabled: bool,
}

impl Default for PollConfig {
    fn default() -> Self {
        Self {
            interval_seconds: 30,
            detail_batch_limit: 20,
            retry_bound: 5,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid poll configuration: {0}")]
pub struct PollConfigError(String);

impl PollConfig {
    pub fn validate(&self) -> Result<(), PollConfigError> {
        if self.interval_seconds < 1 {
            return Err(PollConfigError("interval_seconds must be at least 1".into()));
        }
        if self.detail_batch_limit < 1 {
            return Err(PollConfigError("detail_batch_limit must be at least 1".into()));
        }
        if self.retry_bound < 1 {
            return Err(PollConfigError("retry_bound must be at least 1".into()));
        }
        Ok(())
    }

    pub fn interval(&self) -> Duration {
        Duration::from_secs(self.interval_seconds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PollReport {
    pub at: Option<DateTime<Utc>>,
    /// Set for ad-hoc refreshes.
    pub user: Option<String>,
    pub listed_jobs: usize,
    pub detail_queries_issued: usize,
    pub new_jobs: usize,
    pub finalized_jobs: usize,
    pub errors: Vec<String>,
}

#[derive(Default)]
struct PollState {
    /// Active job ids in the order their next detail query is due.
    due: VecDeque<u64>,
    /// Failed accounting attempts per vanished job.
    retries: HashMap<u64, u32>,
}

pub struct Poller {
    gateway: Arc<Gateway>,
    config: PollConfig,
    state: Mutex<PollState>,
    tick_lock: tokio::sync::Mutex<()>,
    last_report: Mutex<Option<PollReport>>,
}

impl Poller {
    /// Panics if `config` is invalid; check it with [`PollConfig::validate`].
    pub fn new(gateway: Arc<Gateway>, config: PollConfig) -> Self {
        if let Err(e) = config.validate() {
            panic!("{e}");
        }
        Self {
            gateway,
            config,
            state: Mutex::new(PollState::default()),
            tick_lock: tokio::sync::Mutex::new(()),
            last_report: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &PollConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn last_report(&self) -> Option<PollReport> {
        self.last_report.lock().clone()
    }

    /// Pending accounting retries, by job id.
    pub fn pending_retries(&self) -> HashMap<u64, u32> {
        self.state.lock().retries.clone()
    }

    /// One full synchronization pass. Ticks never overlap.
    pub async fn tick(&self, now: DateTime<Utc>) -> PollReport {
        let _guard = self.tick_lock.lock().await;
        let mut report = PollReport {
            at: Some(now),
            ..PollReport::default()
        };
        if !self.config.enabled {
            report.errors.push("polling is disabled".into());
            return report;
        }
        let before = match self.gateway.store().open_job_ids(None) {
            Ok(ids) => ids,
            Err(e) => {
                report.errors.push(format!("store: {e}"));
                return self.finish(report);
            }
        };
        let Some(listing) = self
            .list(SYSTEM_PRINCIPAL, JobAction::Status { user: None }, now, &mut report)
            .await
        else {
            return self.finish(report);
        };
        self.count_new(&listing, &before, &mut report);

        let batch = {
            let mut state = self.state.lock();
            let active: HashSet<u64> = listing.iter().filter(|j| !j.status.is_terminal()).map(|j| j.job_id).collect();
            state.due.retain(|id| active.contains(id));
            let queued: HashSet<u64> = state.due.iter().copied().collect();
            for job in &listing {
                if active.contains(&job.job_id) && !queued.contains(&job.job_id) {
                    state.due.push_back(job.job_id);
                }
            }
            for job in &listing {
                state.retries.remove(&job.job_id);
            }
            let n = self.config.detail_batch_limit.min(state.due.len());
            let batch: Vec<u64> = state.due.drain(..n).collect();
            state.due.extend(&batch);
            batch
        };
        self.details(SYSTEM_PRINCIPAL, &batch, now, &mut report).await;

        let listed: HashSet<u64> = listing.iter().map(|j| j.job_id).collect();
        let vanished: Vec<u64> = before.into_iter().filter(|id| !listed.contains(id)).collect();
        self.reconcile(SYSTEM_PRINCIPAL, &vanished, now, &mut report).await;
        self.finish(report)
    }

    /// Synchronize one user's jobs only, running as that user.
    pub async fn refresh_user(&self, user: &str, now: DateTime<Utc>) -> PollReport {
        let mut report = PollReport {
            at: Some(now),
            user: Some(user.to_string()),
            ..PollReport::default()
        };
        if user.is_empty() {
            report.errors.push("user must not be empty".into());
            return report;
        }
        let before = match self.gateway.store().open_job_ids(Some(user)) {
            Ok(ids) => ids,
            Err(e) => {
                report.errors.push(format!("store: {e}"));
                return report;
            }
        };
        let action = JobAction::Refresh { user: user.to_string() };
        let Some(listing) = self.list(user, action, now, &mut report).await else {
            return report;
        };
        // A scheduler that ignores the user filter must not widen the scope.
        let listing: Vec<JobSummary> = listing.into_iter().filter(|j| j.user == user).collect();
        report.listed_jobs = listing.len();
        self.count_new(&listing, &before, &mut report);
        {
            let mut state = self.state.lock();
            for job in &listing {
                state.retries.remove(&job.job_id);
            }
        }
        let batch: Vec<u64> = listing
            .iter()
            .filter(|j| !j.status.is_terminal())
            .map(|j| j.job_id)
            .take(self.config.detail_batch_limit)
            .collect();
        self.details(user, &batch, now, &mut report).await;
        let listed: HashSet<u64> = listing.iter().map(|j| j.job_id).collect();
        let vanished: Vec<u64> = before.into_iter().filter(|id| !listed.contains(id)).collect();
        self.reconcile(user, &vanished, now, &mut report).await;
        report
    }

    /// Close out jobs that left the live listing. Returns how many were
    /// finalized.
    pub async fn reconcile_disappeared(&self, job_ids: &[u64], now: DateTime<Utc>) -> usize {
        let mut report = PollReport::default();
        self.reconcile(SYSTEM_PRINCIPAL, job_ids, now, &mut report).await;
        report.finalized_jobs
    }

    /// Tick every `interval_seconds` until `shutdown` turns true. A slow tick
    /// delays the next one rather than bunching them up.
    pub async fn run(self: Arc<Self>, clock: Arc<dyn Clock>, mut shutdown: tokio::sync::watch::Receiver<bool>) {
        let mut interval = tokio::time::interval(self.config.interval());
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = interval.tick() => {
                    let report = self.tick(clock.now()).await;
                    for e in &report.errors {
                        tracing::warn!("poll: {e}");
                    }
                }
                changed = shutdown.changed() => {
                    if changed.is_err() || *shutdown.borrow() {
                        break;
                    }
                }
            }
        }
    }

    fn finish(&self, report: PollReport) -> PollReport {
        *self.last_report.lock() = Some(report.clone());
        report
    }

    async fn list(
        &self,
        principal: &str,
        action: JobAction,
        now: DateTime<Utc>,
        report: &mut PollReport,
    ) -> Option<Vec<JobSummary>> {
        let served = match self.gateway.handle(JobRequest::new(principal, action, now)).await {
            Ok(s) => s,
            Err(e) => {
                report.errors.push(format!("list: {e}"));
                return None;
            }
        };
        // A cached listing may be stale; acting on it could close live jobs.
        let Served::Fresh(response) = served else {
            report.errors.push("list: throttled, tick skipped".into());
            return None;
        };
        match &*response {
            GatewayResponse::Jobs { jobs } => {
                report.listed_jobs = jobs.len();
                Some(jobs.clone())
            }
            other => {
                report.errors.push(format!("list: unexpected response {other:?}"));
                None
            }
        }
    }

    fn count_new(&self, listing: &[JobSummary], before: &[u64], report: &mut PollReport) {
        let open: HashSet<u64> = before.iter().copied().collect();
        report.new_jobs = listing
            .iter()
            .filter(|j| !open.contains(&j.job_id))
            .filter(|j| matches!(self.gateway.store().get_job(j.job_id), Ok(r) if !r.is_final()))
            .count();
    }

    async fn details(&self, principal: &str, batch: &[u64], now: DateTime<Utc>, report: &mut PollReport) {
        for &job_id in batch {
            let request = JobRequest::new(principal, JobAction::StatusDetail { job_id }, now);
            report.detail_queries_issued += 1;
            match self.gateway.handle(request).await {
                Ok(_) => {}
                Err(e @ GatewayError::Throttled { .. }) => {
                    report.detail_queries_issued -= 1;
                    report.errors.push(format!("detail {job_id}: {e}"));
                    break;
                }
                Err(e) => report.errors.push(format!("detail {job_id}: {e}")),
            }
        }
    }

    async fn reconcile(&self, principal: &str, job_ids: &[u64], now: DateTime<Utc>, report: &mut PollReport) {
        let store = self.gateway.store().clone();
        for &job_id in job_ids {
            let request = JobRequest::new(principal, JobAction::Accounting { job_id }, now);
            let outcome = self.gateway.handle(request).await;
            // Empty when accounting simply has no record yet.
            let failure = match outcome.as_ref().map(|s| &**s.response()) {
                Ok(GatewayResponse::Accounting { record }) => match store.finalize_job(job_id, record) {
                    Ok(_) | Err(StoreError::AlreadyFinal(_)) => {
                        self.state.lock().retries.remove(&job_id);
                        report.finalized_jobs += 1;
                        continue;
                    }
                    Err(e) => format!("store: {e}"),
                },
                Ok(GatewayResponse::AccountingPending { .. }) => String::new(),
                Ok(other) => format!("unexpected response {other:?}"),
                Err(e @ GatewayError::Throttled { .. }) => {
                    report.errors.push(format!("accounting {job_id}: {e}"));
                    break;
                }
                Err(e) => e.to_string(),
            };
            let attempts = {
                let mut state = self.state.lock();
                let n = state.retries.entry(job_id).or_insert(0);
                *n += 1;
                *n
            };
            if attempts >= self.config.retry_bound {
                match store.finalize_unresolved(job_id) {
                    Ok(_) | Err(StoreError::AlreadyFinal(_)) => {
                        self.state.lock().retries.remove(&job_id);
                        report.finalized_jobs += 1;
                        report
                            .errors
                            .push(format!("accounting {job_id}: gave up after {attempts} attempts"));
                    }
                    Err(e) => report.errors.push(format!("accounting {job_id}: {e}")),
                }
            } else if !failure.is_empty() {
                report.errors.push(format!("accounting {job_id}: {failure}"));
            }
        }
    }
}
