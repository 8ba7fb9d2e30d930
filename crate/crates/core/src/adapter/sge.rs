//! SGE-style adapter.
//!
//! The text grammar below is frozen and shared with the simulator's emitter
//! ([`crate::sim::emit`]), so parser and emitter can be checked against each
//! other without a real cluster.
//!
//! * List (`qstat -u USER`): two header lines, then one whitespace-separated
//!   record per job: `job-ID prior name user state MM/DD/YYYY HH:MM:SS
//!   [queue@node] slots`. The queue column is blank while a job is queued.
//! * Detail (`qstat -j ID`): a `key: value` stanza, see [`detail_keys`].
//! * Accounting (`qacct -j ID`): a `key value` stanza, see [`acct_keys`].

use std::collections::{BTreeMap, HashSet};

use chrono::NaiveDateTime;
use regex::Regex;
use std::sync::LazyLock;

use super::memory::{self, MemoryError};
use super::{
    AccountingRecord, AdapterError, CommandKind, CommandRequest, JobDetail, JobStatus, JobSummary,
    SchedulerAdapter, SubmitSpec,
};
use crate::command::{CommandLine, ExecResult};
use crate::duration::parse_hms;

pub const LIST_HEADER: &str = "job-ID  prior   name       user         state submit/start at     queue                          slots ja-task-ID";
pub const LIST_RULE: &str = "-----------------------------------------------------------------------------------------------------------------";
pub const STANZA_RULE: &str = "==============================================================";
pub const DATE_FORMAT: &str = "%m/%d/%Y %H:%M:%S";
pub const PARALLEL_ENV: &str = "smp";

pub mod detail_keys {
    pub const JOB_NUMBER: &str = "job_number";
    pub const JOB_NAME: &str = "job_name";
    pub const OWNER: &str = "owner";
    pub const WORKDIR: &str = "sge_o_workdir";
    pub const CMD: &str = "cmd";
    pub const SCRIPT_FILE: &str = "script_file";
    pub const STDOUT_PATH: &str = "stdout_path";
    pub const STDERR_PATH: &str = "stderr_path";
    pub const HARD_RESOURCES: &str = "hard_resource_list";
    pub const PARALLEL: &str = "parallel";
    pub const SLOTS: &str = "slots";
    pub const USAGE: &str = "usage";
    pub const RUNTIME: &str = "runtime";
    pub const TIME_REMAINING: &str = "time_remaining";
    /// Emission order.
    pub const ALL: [&str; 14] = [
        JOB_NUMBER, JOB_NAME, OWNER, WORKDIR, CMD, SCRIPT_FILE, STDOUT_PATH, STDERR_PATH,
        HARD_RESOURCES, PARALLEL, SLOTS, USAGE, RUNTIME, TIME_REMAINING,
    ];
}

pub mod acct_keys {
    pub const JOB_NUMBER: &str = "job_number";
    pub const EXIT_STATUS: &str = "exit_status";
    pub const DELETED: &str = "deleted";
    pub const RU_WALLCLOCK: &str = "ru_wallclock";
    pub const MAXVMEM: &str = "maxvmem";
}

/// Resource name carrying the memory request in `-l` lists.
pub const MEMORY_RESOURCE: &str = "h_vmem";

/// Raw state tokens and what they mean. The first entry per status is the one
/// the emitter prints.
pub const STATE_TABLE: &[(&str, JobStatus)] = &[
    ("qw", JobStatus::Queued),
    ("hqw", JobStatus::Queued),
    ("r", JobStatus::Running),
    ("t", JobStatus::Running),
    ("s", JobStatus::Suspended),
    ("S", JobStatus::Suspended),
    ("Eqw", JobStatus::Error),
    ("dr", JobStatus::Deleted),
];

/// The state letter printed for a live job, `None` for statuses that never
/// appear in a listing.
pub fn state_token(status: JobStatus) -> Option<&'static str> {
    STATE_TABLE
        .iter()
        .find(|(_, s)| *s == status)
        .map(|(token, _)| *token)
}

/// Total mapping from a raw state token to a [`JobStatus`]. Canonical status
/// names map to themselves; anything unrecognized is `Unknown`.
pub fn map_status(raw: &str) -> JobStatus {
    let raw = raw.trim();
    STATE_TABLE
        .iter()
        .find(|(token, _)| *token == raw)
        .map(|(_, s)| *s)
        .or_else(|| JobStatus::ALL.into_iter().find(|s| s.name() == raw))
        .unwrap_or(JobStatus::Unknown)
}

pub fn submit_ack(job_id: u64, job_name: &str) -> String {
    format!("Your job {job_id} (\"{job_name}\") has been submitted\n")
}

/// The stderr text `qacct` prints when it has no record for a job.
pub fn accounting_missing(job_id: u64) -> String {
    format!("error: job id {job_id} not found\n")
}

static SUBMIT_ACK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Your job (\d+) ").expect("valid regex"));

#[derive(Debug, Clone)]
pub struct SgeAdapter {
    accounting: bool,
}

impl Default for SgeAdapter {
    fn default() -> Self {
        Self::new()
    }
}

impl SgeAdapter {
    pub fn new() -> Self {
        Self { accounting: true }
    }

    /// For sites where `qacct` is not available to users.
    pub fn without_accounting() -> Self {
        Self { accounting: false }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> AdapterError {
    AdapterError::Parse {
        line,
        message: message.into(),
    }
}

fn memory_err(line: usize, token: &str, e: MemoryError) -> AdapterError {
    match e {
        MemoryError::BadUnit => AdapterError::Unit(token.to_string()),
        MemoryError::BadNumber => parse_err(line, format!("bad memory value {token:?}")),
    }
}

fn parse_memory_field(line: usize, token: &str) -> Result<u64, AdapterError> {
    if token == "N/A" {
        return Ok(0);
    }
    memory::parse_bytes(token).map_err(|e| memory_err(line, token, e))
}

fn parse_duration_field(line: usize, key: &str, value: &str) -> Result<u64, AdapterError> {
    parse_hms(value).ok_or_else(|| parse_err(line, format!("{key}: bad duration {value:?}")))
}

fn is_decoration(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.bytes().all(|b| b == b'=' || b == b'-')
}

/// Collect `key<sep>value` lines, remembering each key's line number.
fn stanza<'a>(
    raw: &'a str,
    split: impl Fn(&'a str) -> Option<(&'a str, &'a str)>,
) -> Result<BTreeMap<&'a str, (usize, &'a str)>, AdapterError> {
    let mut fields = BTreeMap::new();
    for (idx, line) in raw.lines().enumerate() {
        if is_decoration(line) {
            continue;
        }
        let (key, value) = split(line).ok_or_else(|| parse_err(idx + 1, format!("expected a key/value line, got {line:?}")))?;
        fields.insert(key.trim(), (idx + 1, value.trim()));
    }
    Ok(fields)
}

fn parse_u64(line: usize, key: &str, value: &str) -> Result<u64, AdapterError> {
    value
        .parse()
        .map_err(|_| parse_err(line, format!("{key}: expected an unsigned integer, got {value:?}")))
}

fn parse_job_id(line: usize, value: &str) -> Result<u64, AdapterError> {
    match value.parse::<u64>() {
        Ok(id) if id > 0 => Ok(id),
        _ => Err(parse_err(line, format!("bad job id {value:?}"))),
    }
}

fn parse_flag(line: usize, key: &str, value: &str) -> Result<bool, AdapterError> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(line, format!("{key}: expected 0 or 1, got {value:?}"))),
    }
}

impl SchedulerAdapter for SgeAdapter {
    fn name(&self) -> &'static str {
        "sge"
    }

    fn supports(&self, kind: CommandKind) -> bool {
        kind != CommandKind::Accounting || self.accounting
    }

    fn render_command(&self, request: &CommandRequest) -> Result<CommandLine, AdapterError> {
        let kind = request.kind();
        if !self.supports(kind) {
            return Err(AdapterError::UnsupportedKind(kind));
        }
        let argv = match request {
            CommandRequest::List => vec!["qstat".into(), "-u".into(), "*".into()],
            CommandRequest::ListForUser { user } => {
                if user.is_empty() || user == "*" || user.chars().any(|c| c.is_whitespace() || c.is_control()) {
                    return Err(AdapterError::InvalidParams(format!("bad user name {user:?}")));
                }
                vec!["qstat".into(), "-u".into(), user.clone()]
            }
            CommandRequest::Detail { job_id } => {
                vec!["qstat".into(), "-j".into(), checked_id(*job_id)?]
            }
            CommandRequest::Cancel { job_id } => vec!["qdel".into(), checked_id(*job_id)?],
            CommandRequest::Accounting { job_id } => {
                vec!["qacct".into(), "-j".into(), checked_id(*job_id)?]
            }
            CommandRequest::Submit(spec) => {
                spec.validate()?;
                let mut argv: Vec<String> = vec![
                    "qsub".into(),
                    "-N".into(),
                    spec.job_name.clone(),
                    "-wd".into(),
                    spec.source_directory.clone(),
                    "-l".into(),
                    format!("{MEMORY_RESOURCE}={}", spec.memory_requested),
                ];
                if let Some(out) = &spec.output_path {
                    argv.extend(["-o".into(), out.clone()]);
                }
                if spec.parallel {
                    argv.extend(["-pe".into(), PARALLEL_ENV.into(), spec.cores.to_string()]);
                }
                argv.extend(spec.extra_args.iter().cloned());
                argv.push(spec.script_path.clone());
                argv
            }
        };
        Ok(CommandLine::from(argv))
    }

    fn parse_job_list(&self, raw: &str) -> Result<Vec<JobSummary>, AdapterError> {
        let mut jobs = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in raw.lines().enumerate() {
            let n = idx + 1;
            if is_decoration(line) || line.trim_start().starts_with("job-ID") {
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            let (queue, slots) = match t.len() {
                8 => ("", t[7]),
                9 => (t[7], t[8]),
                k => return Err(parse_err(n, format!("expected 8 or 9 columns, found {k}"))),
            };
            let job_id = parse_job_id(n, t[0])?;
            if !seen.insert(job_id) {
                return Err(parse_err(n, format!("job {job_id} listed twice")));
            }
            t[1].parse::<f64>()
                .map_err(|_| parse_err(n, format!("bad priority {:?}", t[1])))?;
            let stamp = format!("{} {}", t[5], t[6]);
            let at = NaiveDateTime::parse_from_str(&stamp, DATE_FORMAT)
                .map_err(|_| parse_err(n, format!("bad timestamp {stamp:?}")))?;
            let slots = match slots.parse::<u32>() {
                Ok(s) if s > 0 => s,
                _ => return Err(parse_err(n, format!("bad slot count {slots:?}"))),
            };
            jobs.push(JobSummary {
                job_id,
                job_name: t[2].to_string(),
                user: t[3].to_string(),
                status: map_status(t[4]),
                started_or_submitted_at: at,
                queue_or_node: queue.to_string(),
                slots,
            });
        }
        Ok(jobs)
    }

    fn parse_job_detail(&self, raw: &str) -> Result<JobDetail, AdapterError> {
        use detail_keys as k;
        let fields = stanza(raw, |line| line.split_once(':'))?;
        let text = |key: &str| fields.get(key).map(|(_, v)| v.to_string()).unwrap_or_default();

        let (line, id) = fields
            .get(k::JOB_NUMBER)
            .ok_or_else(|| parse_err(0, "missing job_number"))?;
        let job_id = parse_job_id(*line, id)?;

        let mut memory_requested = String::new();
        if let Some((line, list)) = fields.get(k::HARD_RESOURCES) {
            for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (name, value) = item
                    .split_once('=')
                    .ok_or_else(|| parse_err(*line, format!("bad resource {item:?}")))?;
                if name.trim() == MEMORY_RESOURCE {
                    parse_memory_field(*line, value.trim())?;
                    memory_requested = value.trim().to_string();
                }
            }
        }

        let parallel = match fields.get(k::PARALLEL) {
            Some((line, v)) => parse_flag(*line, k::PARALLEL, v)?,
            None => false,
        };
        let cores = match fields.get(k::SLOTS) {
            Some((line, v)) => match parse_u64(*line, k::SLOTS, v)? {
                0 => return Err(parse_err(*line, "slots must be at least 1")),
                s => u32::try_from(s).map_err(|_| parse_err(*line, "slot count too large"))?,
            },
            None => 1,
        };
        if !parallel && cores != 1 {
            let line = fields.get(k::SLOTS).map(|(l, _)| *l).unwrap_or(0);
            return Err(parse_err(line, "non-parallel job with more than one slot"));
        }

        let (mut cpu, mut vmem, mut maxvmem) = (0, 0, 0);
        if let Some((line, usage)) = fields.get(k::USAGE) {
            for item in usage.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (name, value) = item
                    .split_once('=')
                    .ok_or_else(|| parse_err(*line, format!("bad usage entry {item:?}")))?;
                let value = value.trim();
                match name.trim() {
                    "cpu" => cpu = parse_duration_field(*line, "cpu", value)?,
                    "vmem" => vmem = parse_memory_field(*line, value)?,
                    "maxvmem" => maxvmem = parse_memory_field(*line, value)?,
                    _ => {}
                }
            }
            if maxvmem < vmem {
                return Err(parse_err(*line, "maxvmem is below vmem"));
            }
        }

        let run_time_secs = match fields.get(k::RUNTIME) {
            Some((line, v)) => parse_duration_field(*line, k::RUNTIME, v)?,
            None => 0,
        };
        let time_remaining_secs = match fields.get(k::TIME_REMAINING) {
            Some((line, v)) => Some(parse_duration_field(*line, k::TIME_REMAINING, v)?),
            None => None,
        };

        Ok(JobDetail {
            job_id,
            job_name: text(k::JOB_NAME),
            owner: text(k::OWNER),
            script_path: text(k::SCRIPT_FILE),
            source_directory: text(k::WORKDIR),
            submit_command: text(k::CMD),
            output_path: text(k::STDOUT_PATH),
            error_path: text(k::STDERR_PATH),
            memory_requested,
            parallel,
            cores,
            cpu_time_secs: cpu,
            current_memory: vmem,
            maximum_memory: maxvmem,
            run_time_secs,
            time_remaining_secs,
        })
    }

    fn parse_accounting(&self, raw: &str) -> Result<AccountingRecord, AdapterError> {
        use acct_keys as k;
        if raw.lines().all(is_decoration) {
            return Err(AdapterError::NotFinished);
        }
        let fields = stanza(raw, |line| {
            let line = line.trim();
            let cut = line.find(char::is_whitespace)?;
            Some((&line[..cut], &line[cut..]))
        })?;
        let require = |key: &'static str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| parse_err(0, format!("missing {key}")))
        };

        let (line, id) = require(k::JOB_NUMBER)?;
        let job_id = parse_job_id(line, id)?;
        let (line, exit) = require(k::EXIT_STATUS)?;
        let exit_token = exit.split_whitespace().next().unwrap_or("");
        let exit_code: i32 = exit_token
            .parse()
            .map_err(|_| parse_err(line, format!("bad exit_status {exit:?}")))?;
        let deleted = match fields.get(k::DELETED) {
            Some((line, v)) => parse_flag(*line, k::DELETED, v)?,
            None => false,
        };
        let (line, wall) = require(k::RU_WALLCLOCK)?;
        let final_run_time_secs = parse_u64(line, k::RU_WALLCLOCK, wall.trim_end_matches('s'))?;
        let maximum_memory = match fields.get(k::MAXVMEM) {
            Some((line, v)) => parse_memory_field(*line, v)?,
            None => 0,
        };

        Ok(AccountingRecord {
            job_id,
            final_status: AccountingRecord::final_status_for(exit_code, deleted),
            final_run_time_secs,
            maximum_memory,
            exit_code,
        })
    }

    fn parse_submit(&self, raw: &str) -> Result<u64, AdapterError> {
        let caps = SUBMIT_ACK
            .captures(raw.trim_start())
            .ok_or_else(|| parse_err(1, format!("unexpected submit reply {:?}", raw.trim())))?;
        parse_job_id(1, &caps[1])
    }

    fn map_status(&self, raw: &str) -> JobStatus {
        map_status(raw)
    }

    fn default_output_path(&self, spec: &SubmitSpec, job_id: u64) -> String {
        format!("{}/{}.o{job_id}", spec.source_directory.trim_end_matches('/'), spec.job_name)
    }

    fn default_error_path(&self, spec: &SubmitSpec, job_id: u64) -> String {
        format!("{}/{}.e{job_id}", spec.source_directory.trim_end_matches('/'), spec.job_name)
    }

    fn interpret_accounting(&self, result: &ExecResult) -> Result<AccountingRecord, AdapterError> {
        if !result.is_success() {
            if result.stderr.contains("not found") {
                return Err(AdapterError::NotFinished);
            }
            return Err(parse_err(
                0,
                format!("qacct exited with {}: {}", result.exit_code, result.stderr.trim()),
            ));
        }
        self.parse_accounting(&result.stdout)
    }
}

fn checked_id(job_id: u64) -> Result<String, AdapterError> {
    if job_id == 0 {
        return Err(AdapterError::InvalidParams("job id must be positive".into()));
    }
    Ok(job_id.to_string())
}
