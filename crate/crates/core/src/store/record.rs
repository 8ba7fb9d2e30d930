use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::adapter::JobStatus;

/// One archived job. Field names serialize to the archive's column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JobRecord {
    pub job_id: u64,
    pub job_name: String,
    pub user: String,
    pub status: JobStatus,
    /// Script path.
    pub path: String,
    /// Submit command line.
    pub command: String,
    pub source_directory: String,
    pub outpath: String,
    pub memory_requested: String,
    pub parallel: bool,
    pub cores: u32,
    /// `YYYY-MM-DDTHH:MM:SSZ`, set once at insertion.
    pub time_added: String,
    /// `HH:MM:SS`.
    pub run_time: String,
    /// `HH:MM:SS`, empty when the scheduler reports no limit.
    pub time_remaining: String,
    pub current_memory: u64,
    pub maximum_memory: u64,
    pub cluster_node: String,
    pub final_run_time: String,
    pub final_status: String,
}

impl JobRecord {
    /// A fresh record carrying just the identifying fields.
    pub fn new(job_id: u64, job_name: impl Into<String>, user: impl Into<String>, status: JobStatus) -> Self {
        Self {
            job_id,
            job_name: job_name.into(),
            user: user.into(),
            status,
            path: String::new(),
            command: String::new(),
            source_directory: String::new(),
            outpath: String::new(),
            memory_requested: String::new(),
            parallel: false,
            cores: 1,
            time_added: String::new(),
            run_time: String::new(),
            time_remaining: String::new(),
            current_memory: 0,
            maximum_memory: 0,
            cluster_node: String::new(),
            final_run_time: String::new(),
            final_status: String::new(),
        }
    }

    pub fn is_final(&self) -> bool {
        !self.final_status.is_empty()
    }
}

/// A tag value extracted by the analytics rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TagValue {
    Number(f64),
    Text(String),
}

impl TagValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            TagValue::Number(n) => Some(*n),
            TagValue::Text(_) => None,
        }
    }
}

impl fmt::Display for TagValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagValue::Number(n) => write!(f, "{n}"),
            TagValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for TagValue {
    fn from(s: &str) -> Self {
        TagValue::Text(s.to_string())
    }
}

impl From<f64> for TagValue {
    fn from(n: f64) -> Self {
        TagValue::Number(n)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagSet {
    pub job_id: u64,
    pub tags: BTreeMap<String, TagValue>,
}

/// Filter for [`super::JobStore::list_jobs`]. Clauses are ANDed; an empty
/// query must set `allow_all`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryQuery {
    pub user: Option<String>,
    pub status_in: Option<BTreeSet<JobStatus>>,
    pub tag_equals: Option<BTreeMap<String, TagValue>>,
    /// Inclusive.
    pub added_after: Option<DateTime<Utc>>,
    /// Exclusive.
    pub added_before: Option<DateTime<Utc>>,
    /// `Some(true)` keeps only records with a final status.
    pub finalized: Option<bool>,
    pub allow_all: bool,
}

impl HistoryQuery {
    pub fn all() -> Self {
        Self {
            allow_all: true,
            ..Self::default()
        }
    }

    pub fn for_user(user: impl Into<String>) -> Self {
        Self {
            user: Some(user.into()),
            ..Self::default()
        }
    }

    pub fn with_status(mut self, statuses: impl IntoIterator<Item = JobStatus>) -> Self {
        self.status_in = Some(statuses.into_iter().collect());
        self
    }

    pub fn finalized(mut self, yes: bool) -> Self {
        self.finalized = Some(yes);
        self
    }

    pub fn has_filter(&self) -> bool {
        self.user.is_some()
            || self.status_in.is_some()
            || self.tag_equals.is_some()
            || self.added_after.is_some()
            || self.added_before.is_some()
            || self.finalized.is_some()
    }
}
