//! Job archive on an embedded SQLite file.
//!
//! The `Job` table carries exactly the archive's nineteen columns. Tags and
//! the stderr path live in side tables keyed by `jobId`. All access goes
//! through one connection behind a mutex, so writers are serialized and a
//! reader always sees a committed state.

mod record;

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use parking_lot::Mutex;
use rusqlite::types::Value;
use rusqlite::{params, params_from_iter, Connection, OptionalExtension, Row, Transaction};
use thiserror::Error;

pub use record::{HistoryQuery, JobRecord, TagSet, TagValue};

use crate::adapter::{AccountingRecord, JobStatus};
use crate::clock::{Clock, SystemClock};
use crate::duration::format_hms;

pub const SCHEMA_VERSION: i64 = 1;
pub const MAX_USER_LEN: usize = 30;

/// Column names and declared types, in archive order.
pub const JOB_COLUMNS: [(&str, &str); 19] = [
    ("jobId", "INTEGER"),
    ("jobName", "TEXT"),
    ("user", "VARCHAR(30)"),
    ("status", "INTEGER"),
    ("path", "TEXT"),
    ("command", "TEXT"),
    ("sourceDirectory", "TEXT"),
    ("outpath", "TEXT"),
    ("memoryRequested", "TEXT"),
    ("parallel", "INTEGER"),
    ("cores", "INTEGER"),
    ("timeAdded", "VARCHAR(30)"),
    ("runTime", "TEXT"),
    ("timeRemaining", "TEXT"),
    ("currentMemory", "INTEGER"),
    ("maximumMemory", "INTEGER"),
    ("clusterNode", "TEXT"),
    ("finalRunTime", "TEXT"),
    ("finalStatus", "TEXT"),
];

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS Job (
    jobId           INTEGER PRIMARY KEY,
    jobName         TEXT NOT NULL DEFAULT '',
    user            VARCHAR(30) NOT NULL DEFAULT '',
    status          INTEGER NOT NULL,
    path            TEXT NOT NULL DEFAULT '',
    command         TEXT NOT NULL DEFAULT '',
    sourceDirectory TEXT NOT NULL DEFAULT '',
    outpath         TEXT NOT NULL DEFAULT '',
    memoryRequested TEXT NOT NULL DEFAULT '',
    parallel        INTEGER NOT NULL DEFAULT 0 CHECK (parallel IN (0, 1)),
    cores           INTEGER NOT NULL DEFAULT 1 CHECK (cores >= 1),
    timeAdded       VARCHAR(30) NOT NULL,
    runTime         TEXT NOT NULL DEFAULT '',
    timeRemaining   TEXT NOT NULL DEFAULT '',
    currentMemory   INTEGER NOT NULL DEFAULT 0,
    maximumMemory   INTEGER NOT NULL DEFAULT 0,
    clusterNode     TEXT NOT NULL DEFAULT '',
    finalRunTime    TEXT NOT NULL DEFAULT '',
    finalStatus     TEXT NOT NULL DEFAULT ''
);
CREATE INDEX IF NOT EXISTS JobByUser ON Job (user);
CREATE INDEX IF NOT EXISTS JobByAdded ON Job (timeAdded DESC, jobId DESC);
CREATE TABLE IF NOT EXISTS JobTag (
    jobId     INTEGER NOT NULL REFERENCES Job (jobId) ON DELETE CASCADE,
    tagKey    TEXT NOT NULL,
    textValue TEXT,
    numValue  REAL,
    PRIMARY KEY (jobId, tagKey)
);
CREATE TABLE IF NOT EXISTS JobExtra (
    jobId      INTEGER PRIMARY KEY REFERENCES Job (jobId) ON DELETE CASCADE,
    stderrPath TEXT NOT NULL DEFAULT ''
);
"#;

const TIME_ADDED_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("job {0} not found")]
    NotFound(u64),
    #[error("job {0} is finalized and can no longer change")]
    AlreadyFinal(u64),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("database is at schema version {found}, expected {SCHEMA_VERSION}")]
    SchemaVersion { found: i64 },
    #[error("storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("export failed: {0}")]
    Export(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Upserted {
    pub record: JobRecord,
    pub inserted: bool,
}

pub struct JobStore {
    conn: Mutex<Connection>,
    clock: Arc<dyn Clock>,
}

impl JobStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::with_connection(Connection::open(path)?, Arc::new(SystemClock))
    }

    pub fn open_with_clock(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        Self::with_connection(Connection::open(path)?, clock)
    }

    pub fn in_memory(clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        Self::with_connection(Connection::open_in_memory()?, clock)
    }

    fn with_connection(conn: Connection, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        conn.pragma_update(None, "foreign_keys", true)?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        let version: i64 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        match version {
            0 => {
                conn.execute_batch(SCHEMA)?;
                conn.pragma_update(None, "user_version", SCHEMA_VERSION)?;
            }
            SCHEMA_VERSION => conn.execute_batch(SCHEMA)?,
            found => return Err(StoreError::SchemaVersion { found }),
        }
        Ok(Self {
            conn: Mutex::new(conn),
            clock,
        })
    }

    /// `(name, declared type)` of every `Job` column, read back from SQLite.
    pub fn schema_columns(&self) -> Result<Vec<(String, String)>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare("SELECT name, type FROM pragma_table_info('Job') ORDER BY cid")?;
        let cols = stmt
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
            .collect::<Result<_, _>>()?;
        Ok(cols)
    }

    pub fn schema_version(&self) -> Result<i64, StoreError> {
        Ok(self
            .conn
            .lock()
            .pragma_query_value(None, "user_version", |r| r.get(0))?)
    }

    /// Insert a new record or merge into the stored one.
    ///
    /// On update, text fields only change when the new value is nonempty,
    /// `timeAdded` never changes and `maximumMemory` is a running maximum that
    /// also covers `currentMemory`.
    pub fn upsert_job(&self, record: &JobRecord) -> Result<Upserted, StoreError> {
        validate(record)?;
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let existing = get(&tx, record.job_id)?;
        let (merged, inserted) = match existing {
            Some(old) if old.is_final() => return Err(StoreError::AlreadyFinal(record.job_id)),
            Some(old) => (merge(old, record), false),
            None => {
                let mut new = record.clone();
                new.time_added = normalize_time_added(&record.time_added, self.clock.now())?;
                new.maximum_memory = new.maximum_memory.max(new.current_memory);
                (new, true)
            }
        };
        write(&tx, &merged)?;
        tx.commit()?;
        Ok(Upserted {
            record: merged,
            inserted,
        })
    }

    pub fn get_job(&self, job_id: u64) -> Result<JobRecord, StoreError> {
        get(&self.conn.lock(), job_id)?.ok_or(StoreError::NotFound(job_id))
    }

    /// Set the live status only, e.g. a cancel waiting to be confirmed.
    pub fn mark_status(&self, job_id: u64, status: JobStatus) -> Result<JobRecord, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let mut record = get(&tx, job_id)?.ok_or(StoreError::NotFound(job_id))?;
        if record.is_final() {
            return Err(StoreError::AlreadyFinal(job_id));
        }
        if status == JobStatus::Completed {
            return Err(StoreError::ConstraintViolation(
                "Completed is only reachable through finalize".into(),
            ));
        }
        record.status = status;
        write(&tx, &record)?;
        tx.commit()?;
        Ok(record)
    }

    /// Apply the scheduler's accounting record. The record is immutable
    /// afterwards.
    pub fn finalize_job(&self, job_id: u64, acct: &AccountingRecord) -> Result<JobRecord, StoreError> {
        if !acct.final_status.is_terminal() {
            return Err(StoreError::ConstraintViolation(format!(
                "{} is not a final status",
                acct.final_status
            )));
        }
        self.finalize_with(job_id, |r| {
            r.status = acct.final_status;
            r.final_status = acct.final_status.name().to_string();
            r.final_run_time = format_hms(acct.final_run_time_secs);
            r.run_time = r.final_run_time.clone();
            r.maximum_memory = r.maximum_memory.max(acct.maximum_memory);
        })
    }

    /// Close a record whose outcome could not be determined.
    pub fn finalize_unresolved(&self, job_id: u64) -> Result<JobRecord, StoreError> {
        self.finalize_with(job_id, |r| {
            r.status = JobStatus::Unknown;
            r.final_status = JobStatus::Unknown.name().to_string();
            r.final_run_time = r.run_time.clone();
        })
    }

    fn finalize_with(&self, job_id: u64, apply: impl FnOnce(&mut JobRecord)) -> Result<JobRecord, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let mut record = get(&tx, job_id)?.ok_or(StoreError::NotFound(job_id))?;
        if record.is_final() {
            return Err(StoreError::AlreadyFinal(job_id));
        }
        apply(&mut record);
        record.current_memory = 0;
        record.time_remaining.clear();
        write(&tx, &record)?;
        tx.commit()?;
        Ok(record)
    }

    /// Matching records, newest `timeAdded` first, ties by descending `jobId`.
    pub fn list_jobs(&self, query: &HistoryQuery) -> Result<Vec<JobRecord>, StoreError> {
        if !query.has_filter() && !query.allow_all {
            return Err(StoreError::InvalidQuery(
                "a query needs at least one filter or allow_all".into(),
            ));
        }
        let mut sql = format!("SELECT {} FROM Job WHERE 1 = 1", column_list());
        let mut args: Vec<Value> = Vec::new();
        if let Some(user) = &query.user {
            sql.push_str(" AND user = ?");
            args.push(Value::Text(user.clone()));
        }
        if let Some(statuses) = &query.status_in {
            if statuses.is_empty() {
                return Ok(Vec::new());
            }
            sql.push_str(&format!(" AND status IN ({})", vec!["?"; statuses.len()].join(", ")));
            args.extend(statuses.iter().map(|s| Value::Integer(s.code())));
        }
        if let Some(tags) = &query.tag_equals {
            for (key, value) in tags {
                let column = match value {
                    TagValue::Text(_) => "textValue",
                    TagValue::Number(_) => "numValue",
                };
                sql.push_str(&format!(
                    " AND EXISTS (SELECT 1 FROM JobTag t WHERE t.jobId = Job.jobId AND t.tagKey = ? AND t.{column} = ?)"
                ));
                args.push(Value::Text(key.clone()));
                args.push(match value {
                    TagValue::Text(s) => Value::Text(s.clone()),
                    TagValue::Number(n) => Value::Real(*n),
                });
            }
        }
        if let Some(after) = query.added_after {
            sql.push_str(" AND timeAdded >= ?");
            args.push(Value::Text(after.format(TIME_ADDED_FORMAT).to_string()));
        }
        if let Some(before) = query.added_before {
            sql.push_str(" AND timeAdded < ?");
            args.push(Value::Text(before.format(TIME_ADDED_FORMAT).to_string()));
        }
        match query.finalized {
            Some(true) => sql.push_str(" AND finalStatus <> ''"),
            Some(false) => sql.push_str(" AND finalStatus = ''"),
            None => {}
        }
        sql.push_str(" ORDER BY timeAdded DESC, jobId DESC");

        let conn = self.conn.lock();
        let mut stmt = conn.prepare(&sql)?;
        let rows = stmt
            .query_map(params_from_iter(args), from_row)?
            .collect::<Result<_, _>>()?;
        Ok(rows)
    }

    /// Ids of records without a final status, ascending.
    pub fn open_job_ids(&self, user: Option<&str>) -> Result<Vec<u64>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare(
            "SELECT jobId FROM Job WHERE finalStatus = '' AND (?1 IS NULL OR user = ?1) ORDER BY jobId",
        )?;
        let ids = stmt
            .query_map([user], |r| r.get::<_, i64>(0))?
            .map(|id| id.map(|id| id as u64))
            .collect::<Result<_, _>>()?;
        Ok(ids)
    }

    pub fn count(&self) -> Result<u64, StoreError> {
        let n: i64 = self.conn.lock().query_row("SELECT COUNT(*) FROM Job", [], |r| r.get(0))?;
        Ok(n as u64)
    }

    /// Replace the tags of one job.
    pub fn set_tags(&self, tags: &TagSet) -> Result<(), StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        if get(&tx, tags.job_id)?.is_none() {
            return Err(StoreError::NotFound(tags.job_id));
        }
        tx.execute("DELETE FROM JobTag WHERE jobId = ?", [tags.job_id as i64])?;
        for (key, value) in &tags.tags {
            let (text, num) = match value {
                TagValue::Text(s) => (Some(s.as_str()), None),
                TagValue::Number(n) => (None, Some(*n)),
            };
            tx.execute(
                "INSERT INTO JobTag (jobId, tagKey, textValue, numValue) VALUES (?, ?, ?, ?)",
                params![tags.job_id as i64, key, text, num],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn get_tags(&self, job_id: u64) -> Result<TagSet, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare("SELECT tagKey, textValue, numValue FROM JobTag WHERE jobId = ?")?;
        let tags = stmt
            .query_map([job_id as i64], |r| {
                let key: String = r.get(0)?;
                let text: Option<String> = r.get(1)?;
                let num: Option<f64> = r.get(2)?;
                Ok((key, num.map(TagValue::Number).unwrap_or_else(|| TagValue::Text(text.unwrap_or_default()))))
            })?
            .collect::<Result<_, _>>()?;
        Ok(TagSet { job_id, tags })
    }

    pub fn set_error_path(&self, job_id: u64, path: &str) -> Result<(), StoreError> {
        self.conn.lock().execute(
            "INSERT INTO JobExtra (jobId, stderrPath) VALUES (?1, ?2)
             ON CONFLICT (jobId) DO UPDATE SET stderrPath = excluded.stderrPath",
            params![job_id as i64, path],
        )?;
        Ok(())
    }

    pub fn error_path(&self, job_id: u64) -> Result<Option<String>, StoreError> {
        Ok(self
            .conn
            .lock()
            .query_row("SELECT stderrPath FROM JobExtra WHERE jobId = ?", [job_id as i64], |r| r.get(0))
            .optional()?
            .filter(|p: &String| !p.is_empty()))
    }

    /// Write the whole `Job` table as CSV, columns in archive order, status as
    /// its integer code.
    pub fn export_csv<W: std::io::Write>(&self, out: W) -> Result<usize, StoreError> {
        let records = self.list_jobs(&HistoryQuery::all())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(JOB_COLUMNS.iter().map(|(name, _)| *name))?;
        for r in &records {
            w.write_record([
                r.job_id.to_string(),
                r.job_name.clone(),
                r.user.clone(),
                r.status.code().to_string(),
                r.path.clone(),
                r.command.clone(),
                r.source_directory.clone(),
                r.outpath.clone(),
                r.memory_requested.clone(),
                u8::from(r.parallel).to_string(),
                r.cores.to_string(),
                r.time_added.clone(),
                r.run_time.clone(),
                r.time_remaining.clone(),
                r.current_memory.to_string(),
                r.maximum_memory.to_string(),
                r.cluster_node.clone(),
                r.final_run_time.clone(),
                r.final_status.clone(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(records.len())
    }

    /// Delete finalized records added before `before` (all finalized records
    /// when `None`). Live records are never purged.
    pub fn purge(&self, before: Option<DateTime<Utc>>) -> Result<usize, StoreError> {
        let cutoff = before.map(|t| t.format(TIME_ADDED_FORMAT).to_string());
        let n = self.conn.lock().execute(
            "DELETE FROM Job WHERE finalStatus <> '' AND (?1 IS NULL OR timeAdded < ?1)",
            [cutoff],
        )?;
        Ok(n)
    }
}

fn validate(r: &JobRecord) -> Result<(), StoreError> {
    let bad = |m: String| Err(StoreError::ConstraintViolation(m));
    if r.job_id == 0 || r.job_id > i64::MAX as u64 {
        return bad(format!("jobId {} out of range", r.job_id));
    }
    if r.user.chars().count() > MAX_USER_LEN {
        return bad(format!("user name longer than {MAX_USER_LEN} characters"));
    }
    if r.cores == 0 {
        return bad("cores must be at least 1".into());
    }
    if r.current_memory > i64::MAX as u64 || r.maximum_memory > i64::MAX as u64 {
        return bad("memory value out of range".into());
    }
    if r.time_added.chars().count() > 30 {
        return bad("timeAdded longer than 30 characters".into());
    }
    if r.is_final() {
        let allowed = [JobStatus::Completed, JobStatus::Error, JobStatus::Deleted, JobStatus::Unknown];
        if !allowed.contains(&r.status) || r.final_status != r.status.name() {
            return bad(format!("finalStatus {:?} does not match status {}", r.final_status, r.status));
        }
    } else if r.status == JobStatus::Completed {
        return bad("a Completed record needs a finalStatus".into());
    }
    Ok(())
}

fn merge(mut old: JobRecord, new: &JobRecord) -> JobRecord {
    let text = |slot: &mut String, value: &String| {
        if !value.is_empty() {
            slot.clone_from(value);
        }
    };
    text(&mut old.job_name, &new.job_name);
    text(&mut old.user, &new.user);
    text(&mut old.path, &new.path);
    text(&mut old.command, &new.command);
    text(&mut old.source_directory, &new.source_directory);
    text(&mut old.outpath, &new.outpath);
    text(&mut old.memory_requested, &new.memory_requested);
    text(&mut old.run_time, &new.run_time);
    text(&mut old.time_remaining, &new.time_remaining);
    text(&mut old.cluster_node, &new.cluster_node);
    text(&mut old.final_run_time, &new.final_run_time);
    text(&mut old.final_status, &new.final_status);
    old.status = new.status;
    old.parallel = new.parallel;
    old.cores = new.cores;
    old.current_memory = new.current_memory;
    old.maximum_memory = old.maximum_memory.max(new.maximum_memory).max(new.current_memory);
    old
}

fn normalize_time_added(raw: &str, now: DateTime<Utc>) -> Result<String, StoreError> {
    if raw.is_empty() {
        return Ok(now.format(TIME_ADDED_FORMAT).to_string());
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Ok(t.with_timezone(&Utc).to_rfc3339_opts(SecondsFormat::Secs, true));
    }
    NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S")
        .map(|t| t.and_utc().format(TIME_ADDED_FORMAT).to_string())
        .map_err(|_| StoreError::ConstraintViolation(format!("timeAdded {raw:?} is not an ISO-8601 timestamp")))
}

fn column_list() -> String {
    JOB_COLUMNS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

fn get(conn: &Connection, job_id: u64) -> Result<Option<JobRecord>, StoreError> {
    Ok(conn
        .query_row(
            &format!("SELECT {} FROM Job WHERE jobId = ?", column_list()),
            [job_id as i64],
            from_row,
        )
        .optional()?)
}

fn write(tx: &Transaction<'_>, r: &JobRecord) -> Result<(), StoreError> {
    let placeholders = vec!["?"; JOB_COLUMNS.len()].join(", ");
    tx.execute(
        &format!("INSERT OR REPLACE INTO Job ({}) VALUES ({placeholders})", column_list()),
        params![
            r.job_id as i64,
            r.job_name,
            r.user,
            r.status.code(),
            r.path,
            r.command,
            r.source_directory,
            r.outpath,
            r.memory_requested,
            r.parallel,
            r.cores,
            r.time_added,
            r.run_time,
            r.time_remaining,
            r.current_memory as i64,
            r.maximum_memory as i64,
            r.cluster_node,
            r.final_run_time,
            r.final_status,
        ],
    )?;
    Ok(())
}

fn from_row(row: &Row<'_>) -> rusqlite::Result<JobRecord> {
    Ok(JobRecord {
        job_id: row.get::<_, i64>(0)? as u64,
        job_name: row.get(1)?,
        user: row.get(2)?,
        status: JobStatus::from_code(row.get(3)?).unwrap_or(JobStatus::Unknown),
        path: row.get(4)?,
        command: row.get(5)?,
        source_directory: row.get(6)?,
        outpath: row.get(7)?,
        memory_requested: row.get(8)?,
        parallel: row.get(9)?,
        cores: row.get(10)?,
        time_added: row.get(11)?,
        run_time: row.get(12)?,
        time_remaining: row.get(13)?,
        current_memory: row.get::<_, i64>(14)? as u64,
        maximum_memory: row.get::<_, i64>(15)? as u64,
        cluster_node: row.get(16)?,
        final_run_time: row.get(17)?,
        final_status: row.get(18)?,
    })
}
