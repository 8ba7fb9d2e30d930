//! Scheduler adapters: render command lines from abstract requests and parse
//! scheduler text output into typed records.
//!
//! Only the SGE-style adapter ships ([`SgeAdapter`]); the [`SchedulerAdapter`]
//! trait is the boundary other scheduler families plug into.

pub mod memory;
pub mod sge;

use std::fmt;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{CommandLine, ExecResult};

pub use sge::SgeAdapter;

/// Job state as far as this system cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobStatus {
    Queued,
    Running,
    Suspended,
    Error,
    Deleted,
    Completed,
    Unknown,
}

impl JobStatus {
    pub const ALL: [JobStatus; 7] = [
        JobStatus::Queued,
        JobStatus::Running,
        JobStatus::Suspended,
        JobStatus::Error,
        JobStatus::Deleted,
        JobStatus::Completed,
        JobStatus::Unknown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            JobStatus::Queued => "Queued",
            JobStatus::Running => "Running",
            JobStatus::Suspended => "Suspended",
            JobStatus::Error => "Error",
            JobStatus::Deleted => "Deleted",
            JobStatus::Completed => "Completed",
            JobStatus::Unknown => "Unknown",
        }
    }

    /// Stable integer code used by the archive's INTEGER `status` column.
    ///
    /// | code | status    |
    /// |------|-----------|
    /// | 0    | Unknown   |
    /// | 1    | Queued    |
    /// | 2    | Running   |
    /// | 3    | Suspended |
    /// | 4    | Error     |
    /// | 5    | Deleted   |
    /// | 6    | Completed |
    pub fn code(self) -> i64 {
        match self {
            JobStatus::Unknown => 0,
            JobStatus::Queued => 1,
            JobStatus::Running => 2,
            JobStatus::Suspended => 3,
            JobStatus::Error => 4,
            JobStatus::Deleted => 5,
            JobStatus::Completed => 6,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        JobStatus::ALL.into_iter().find(|s| s.code() == code)
    }

    /// Statuses an accounting record can end a job with.
    ///
    /// Live listings can also report `Error` (e.g. `Eqw`) or `Deleted` (`dr`)
    /// for a job that has not left the queue yet; the archive only treats a
    /// job as finished once it carries a final status.
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Completed | JobStatus::Error | JobStatus::Deleted)
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the live job listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobSummary {
    pub job_id: u64,
    pub job_name: String,
    pub user: String,
    pub status: JobStatus,
    /// Cluster-local wall time: start time for running jobs, submission time otherwise.
    pub started_or_submitted_at: NaiveDateTime,
    /// `queue@node`; empty while the job waits in the queue.
    pub queue_or_node: String,
    pub slots: u32,
}

impl JobSummary {
    /// The node part of `queue@node`, if any.
    pub fn node(&self) -> &str {
        self.queue_or_node
            .split_once('@')
            .map(|(_, node)| node)
            .unwrap_or("")
    }
}

/// The per-job view from the detail query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobDetail {
    pub job_id: u64,
    pub job_name: String,
    pub owner: String,
    pub script_path: String,
    pub source_directory: String,
    pub submit_command: String,
    pub output_path: String,
    pub error_path: String,
    /// Scheduler text, e.g. `8G`.
    pub memory_requested: String,
    pub parallel: bool,
    pub cores: u32,
    pub cpu_time_secs: u64,
    pub current_memory: u64,
    pub maximum_memory: u64,
    pub run_time_secs: u64,
    pub time_remaining_secs: Option<u64>,
}

/// What a user asks for when creating a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubmitSpec {
    pub job_name: String,
    pub script_path: String,
    pub source_directory: String,
    pub memory_requested: String,
    pub cores: u32,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub output_path: Option<String>,
    #[serde(default)]
    pub extra_args: Vec<String>,
}

impl SubmitSpec {
    pub fn validate(&self) -> Result<(), AdapterError> {
        let invalid = |msg: String| Err(AdapterError::InvalidParams(msg));
        if self.job_name.is_empty() {
            return invalid("job name must not be empty".into());
        }
        if let Some(c) = self
            .job_name
            .chars()
            .find(|c| c.is_whitespace() || c.is_control() || matches!(c, '/' | '\\' | ':' | '@' | '*' | '?'))
        {
            return invalid(format!("job name contains forbidden character {c:?}"));
        }
        for (what, value) in [
            ("script path", &self.script_path),
            ("source directory", &self.source_directory),
        ] {
            if value.is_empty() {
                return invalid(format!("{what} must not be empty"));
            }
            if value.chars().any(|c| c == '\0' || c == '\n' || c == '\r') {
                return invalid(format!("{what} contains a control character"));
            }
        }
        if let Some(out) = &self.output_path {
            if out.is_empty() || out.chars().any(|c| c == '\0' || c == '\n' || c == '\r') {
                return invalid("output path must be a non-empty single line".into());
            }
        }
        if memory::parse_bytes(&self.memory_requested).is_err() {
            return invalid(format!(
                "memory request {:?} is not a size such as 512M or 8G",
                self.memory_requested
            ));
        }
        if self.cores == 0 {
            return invalid("cores must be at least 1".into());
        }
        if !self.parallel && self.cores != 1 {
            return invalid("a non-parallel job requests exactly one core".into());
        }
        if self.extra_args.iter().any(|a| a.contains(['\0', '\n', '\r'])) {
            return invalid("extra arguments must be single-line".into());
        }
        Ok(())
    }
}

/// Post-termination accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccountingRecord {
    pub job_id: u64,
    pub final_status: JobStatus,
    pub final_run_time_secs: u64,
    pub maximum_memory: u64,
    pub exit_code: i32,
}

impl AccountingRecord {
    /// Deleted wins over the exit code; otherwise exit 0 is success.
    pub fn final_status_for(exit_code: i32, deleted: bool) -> JobStatus {
        if deleted {
            JobStatus::Deleted
        } else if exit_code == 0 {
            JobStatus::Completed
        } else {
            JobStatus::Error
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandKind {
    List,
    ListForUser,
    Detail,
    Cancel,
    Submit,
    Accounting,
}

/// An abstract scheduler request; the payload each kind needs is carried by
/// the variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommandRequest {
    List,
    ListForUser { user: String },
    Detail { job_id: u64 },
    Cancel { job_id: u64 },
    Submit(SubmitSpec),
    Accounting { job_id: u64 },
}

impl CommandRequest {
    pub fn kind(&self) -> CommandKind {
        match self {
            CommandRequest::List => CommandKind::List,
            CommandRequest::ListForUser { .. } => CommandKind::ListForUser,
            CommandRequest::Detail { .. } => CommandKind::Detail,
            CommandRequest::Cancel { .. } => CommandKind::Cancel,
            CommandRequest::Submit(_) => CommandKind::Submit,
            CommandRequest::Accounting { .. } => CommandKind::Accounting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("this scheduler adapter does not support {0:?} requests")]
    UnsupportedKind(CommandKind),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    /// `line` is 1-based; 0 means the problem concerns the whole output.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unrecognized memory unit in {0:?}")]
    Unit(String),
    #[error("job has not finished (no accounting record yet)")]
    NotFinished,
}

/// One scheduler family.
pub trait SchedulerAdapter: Send + Sync {
    fn name(&self) -> &'static str;

    fn supports(&self, _kind: CommandKind) -> bool {
        true
    }

    fn render_command(&self, request: &CommandRequest) -> Result<CommandLine, AdapterError>;

    fn parse_job_list(&self, raw: &str) -> Result<Vec<JobSummary>, AdapterError>;

    fn parse_job_detail(&self, raw: &str) -> Result<JobDetail, AdapterError>;

    fn parse_accounting(&self, raw: &str) -> Result<AccountingRecord, AdapterError>;

    /// Extract the new job id from the submit command's output.
    fn parse_submit(&self, raw: &str) -> Result<u64, AdapterError>;

    fn map_status(&self, raw: &str) -> JobStatus;

    /// Where the scheduler puts stdout when the submission does not say.
    fn default_output_path(&self, spec: &SubmitSpec, job_id: u64) -> String;

    /// Where the scheduler puts stderr (the `.e` file).
    fn default_error_path(&self, spec: &SubmitSpec, job_id: u64) -> String;

    /// Interpret a finished accounting command, including the scheduler's
    /// "no record yet" reply.
    fn interpret_accounting(&self, result: &ExecResult) -> Result<AccountingRecord, AdapterError>;
}
