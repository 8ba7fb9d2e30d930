//! Deterministic in-process cluster.
//!
//! [`SimCluster`] accepts the same `qsub`/`qstat`/`qdel`/`qacct` command
//! grammar the adapter renders, plus `tail` and `cat` for log files, and
//! prints the frozen text grammar through [`emit`]. Every random draw happens
//! at submission time from a seeded ChaCha stream, so a seed plus a command
//! and clock script fixes every byte the simulator ever prints.

pub mod emit;
pub mod scenario;

use std::collections::BTreeMap;

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::memory::parse_bytes;
use crate::adapter::sge::{accounting_missing, submit_ack, MEMORY_RESOURCE};
use crate::adapter::{
    AccountingRecord, CommandKind, JobDetail, JobStatus, JobSummary, SchedulerAdapter, SgeAdapter,
    SubmitSpec,
};
use crate::command::{CommandLine, ExecResult};

const MIB: u64 = 1 << 20;
/// One line of job output per this many seconds of runtime.
pub const OUTPUT_LINE_SECS: u64 = 60;
pub const MEMORY_KILL_EXIT: i32 = 137;
pub const FAILURE_EXIT: i32 = 1;
pub const WARNING_LINE: &str = "WARNING: memory usage above 80% of h_vmem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Inclusive bounds, seconds. The lower bound must be at least 1.
    pub queue_delay: (u64, u64),
    /// Inclusive bounds, seconds. The lower bound must be at least 8.
    pub run_duration: (u64, u64),
    pub failure_rate: f64,
    /// Share of failures that are memory kills rather than a plain nonzero exit.
    pub memory_kill_share: f64,
    pub warning_rate: f64,
    /// Every command stalls forever while set (see the sim transport).
    pub stall: bool,
    /// Accounting for a finished job appears this many clock advances later.
    pub accounting_lag: u64,
    pub accounting_available: bool,
    /// Hard runtime limit reported as `time_remaining`.
    pub walltime_secs: u64,
    pub epoch: DateTime<Utc>,
    pub first_job_id: u64,
    pub nodes: u32,
    pub default_memory: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            queue_delay: (1, 120),
            run_duration: (60, 1800),
            failure_rate: 0.1,
            memory_kill_share: 0.5,
            warning_rate: 0.2,
            stall: false,
            accounting_lag: 0,
            accounting_available: true,
            walltime_secs: 86_400,
            epoch: Utc.with_ymd_and_hms(2019, 9, 14, 8, 0, 0).unwrap(),
            first_job_id: 101,
            nodes: 8,
            default_memory: "2G".into(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let (q0, q1) = self.queue_delay;
        let (r0, r1) = self.run_duration;
        if q0 < 1 || q0 > q1 {
            return Err(format!("bad queue delay bounds {q0}..={q1}"));
        }
        if r0 < 8 || r0 > r1 {
            return Err(format!("bad run duration bounds {r0}..={r1}"));
        }
        for (name, p) in [
            ("failure_rate", self.failure_rate),
            ("memory_kill_share", self.memory_kill_share),
            ("warning_rate", self.warning_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.nodes == 0 || self.first_job_id == 0 {
            return Err("nodes and first_job_id must be positive".into());
        }
        parse_bytes(&self.default_memory).map_err(|e| format!("default_memory: {e}"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure,
    MemoryKill,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at: DateTime<Utc>,
    pub job_id: u64,
    pub from: Option<JobStatus>,
    pub to: JobStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimJob {
    pub job_id: u64,
    pub owner: String,
    pub spec: SubmitSpec,
    pub output_path: String,
    pub error_path: String,
    pub submit_command: String,
    pub node: String,
    pub state: JobStatus,
    pub submit_at: DateTime<Utc>,
    pub planned_start: DateTime<Utc>,
    /// Planned runtime once started, in seconds.
    pub run_secs: u64,
    pub outcome: Outcome,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    /// Piecewise-constant memory use: `(seconds since start, bytes)`, offsets
    /// strictly increasing from 0.
    pub memory_curve: Vec<(u64, u64)>,
    pub exit_code: Option<i32>,
    pub deleted: bool,
    pub warns: bool,
    /// Clock advance count when the job ended.
    pub finished_tick: Option<u64>,
    pub history: Vec<Transition>,
}

impl SimJob {
    pub fn is_live(&self) -> bool {
        !self.state.is_terminal()
    }

    /// Seconds spent running as of `now`.
    pub fn elapsed(&self, now: DateTime<Utc>) -> u64 {
        let Some(start) = self.started_at else { return 0 };
        let until = self.ended_at.unwrap_or(now).min(now);
        (until - start).num_seconds().max(0) as u64
    }

    fn curve_prefix(&self, elapsed: u64) -> impl Iterator<Item = u64> + '_ {
        self.memory_curve
            .iter()
            .take_while(move |(offset, _)| *offset <= elapsed)
            .map(|(_, bytes)| *bytes)
    }

    pub fn current_memory(&self, now: DateTime<Utc>) -> u64 {
        if self.state != JobStatus::Running {
            return 0;
        }
        self.curve_prefix(self.elapsed(now)).last().unwrap_or(0)
    }

    pub fn maximum_memory(&self, now: DateTime<Utc>) -> u64 {
        if self.started_at.is_none() {
            return 0;
        }
        self.curve_prefix(self.elapsed(now)).max().unwrap_or(0)
    }

    pub fn queue_or_node(&self) -> String {
        if self.started_at.is_some() {
            format!("all.q@{}", self.node)
        } else {
            String::new()
        }
    }

    pub fn summary(&self) -> JobSummary {
        JobSummary {
            job_id: self.job_id,
            job_name: self.spec.job_name.clone(),
            user: self.owner.clone(),
            status: self.state,
            started_or_submitted_at: self.started_at.unwrap_or(self.submit_at).naive_utc(),
            queue_or_node: self.queue_or_node(),
            slots: self.spec.cores,
        }
    }

    pub fn detail(&self, now: DateTime<Utc>, walltime_secs: u64) -> JobDetail {
        let elapsed = self.elapsed(now);
        JobDetail {
            job_id: self.job_id,
            job_name: self.spec.job_name.clone(),
            owner: self.owner.clone(),
            script_path: self.spec.script_path.clone(),
            source_directory: self.spec.source_directory.clone(),
            submit_command: self.submit_command.clone(),
            output_path: self.output_path.clone(),
            error_path: self.error_path.clone(),
            memory_requested: self.spec.memory_requested.clone(),
            parallel: self.spec.parallel,
            cores: self.spec.cores,
            cpu_time_secs: elapsed * u64::from(self.spec.cores),
            current_memory: self.current_memory(now),
            maximum_memory: self.maximum_memory(now),
            run_time_secs: elapsed,
            time_remaining_secs: (self.state == JobStatus::Running)
                .then(|| walltime_secs.saturating_sub(elapsed)),
        }
    }

    /// Ground-truth accounting, `None` while the job is live.
    pub fn accounting(&self) -> Option<AccountingRecord> {
        if self.is_live() {
            return None;
        }
        let end = self.ended_at?;
        Some(AccountingRecord {
            job_id: self.job_id,
            final_status: self.state,
            final_run_time_secs: self.elapsed(end),
            maximum_memory: self.maximum_memory(end),
            exit_code: self.exit_code.unwrap_or(0),
        })
    }

    fn output_lines(&self, now: DateTime<Utc>) -> Vec<String> {
        (1..=self.elapsed(now) / OUTPUT_LINE_SECS)
            .map(|i| format!("[{}] step {i}: processed batch {i}", self.spec.job_name))
            .collect()
    }

    fn error_lines(&self, now: DateTime<Utc>) -> Vec<String> {
        let mut lines = Vec::new();
        let elapsed = self.elapsed(now);
        if self.warns && elapsed >= self.run_secs / 2 {
            lines.push(WARNING_LINE.to_string());
        }
        if self.state == JobStatus::Error {
            lines.push(match self.outcome {
                Outcome::MemoryKill => format!(
                    "Error: job {} exceeded {MEMORY_RESOURCE}={} and was killed",
                    self.job_id, self.spec.memory_requested
                ),
                _ => format!("Error: process exited with status {FAILURE_EXIT}"),
            });
        }
        lines
    }

    fn transition(&mut self, at: DateTime<Utc>, to: JobStatus) -> Transition {
        let t = Transition {
            at,
            job_id: self.job_id,
            from: Some(self.state),
            to,
        };
        self.state = to;
        self.history.push(t.clone());
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandLogEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub user: String,
    pub argv: CommandLine,
    /// `None` for a command swallowed by a stall.
    pub exit_code: Option<i32>,
}

impl CommandLogEntry {
    /// Which adapter request this command line corresponds to, if any.
    pub fn kind(&self) -> Option<CommandKind> {
        let args: Vec<&str> = self.argv.args().iter().map(String::as_str).collect();
        match (self.argv.program()?, args.as_slice()) {
            ("qstat", ["-u", "*"]) => Some(CommandKind::List),
            ("qstat", [] | ["-u", _]) => Some(CommandKind::ListForUser),
            ("qstat", ["-j", _]) => Some(CommandKind::Detail),
            ("qdel", [_]) => Some(CommandKind::Cancel),
            ("qsub", _) => Some(CommandKind::Submit),
            ("qacct", ["-j", _]) => Some(CommandKind::Accounting),
            _ => None,
        }
    }

    /// The job id argument of a detail, cancel or accounting command.
    pub fn job_id(&self) -> Option<u64> {
        match self.kind()? {
            CommandKind::Detail | CommandKind::Cancel | CommandKind::Accounting => {
                self.argv.args().last()?.parse().ok()
            }
            _ => None,
        }
    }
}

/// Immutable copy of the simulator's full state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub taken_at: DateTime<Utc>,
    pub jobs: Vec<SimJob>,
}

impl Ledger {
    pub fn terminal_accounting(&self) -> Vec<AccountingRecord> {
        self.jobs.iter().filter_map(SimJob::accounting).collect()
    }
}

#[derive(Debug, Clone)]
struct SimFile {
    content: String,
    readable: bool,
}

pub struct SimCluster {
    config: SimConfig,
    rng: ChaCha8Rng,
    now: DateTime<Utc>,
    ticks: u64,
    next_id: u64,
    jobs: BTreeMap<u64, SimJob>,
    files: BTreeMap<String, SimFile>,
    log: Vec<CommandLogEntry>,
    adapter: SgeAdapter,
}

impl SimCluster {
    /// Panics on an invalid config; use [`SimConfig::validate`] first for
    /// untrusted input.
    pub fn new(config: SimConfig) -> Self {
        if let Err(e) = config.validate() {
            panic!("invalid simulator config: {e}");
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            now: config.epoch,
            ticks: 0,
            next_id: config.first_job_id,
            jobs: BTreeMap::new(),
            files: BTreeMap::new(),
            log: Vec::new(),
            adapter: SgeAdapter::new(),
            config,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn set_stall(&mut self, stall: bool) {
        self.config.stall = stall;
    }

    pub fn stalled(&self) -> bool {
        self.config.stall
    }

    pub fn set_accounting_available(&mut self, available: bool) {
        self.config.accounting_available = available;
    }

    pub fn job(&self, job_id: u64) -> Option<&SimJob> {
        self.jobs.get(&job_id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &SimJob> {
        self.jobs.values()
    }

    pub fn live_jobs(&self) -> impl Iterator<Item = &SimJob> {
        self.jobs.values().filter(|j| j.is_live())
    }

    /// True when no job is queued or running.
    pub fn is_quiescent(&self) -> bool {
        self.live_jobs().next().is_none()
    }

    pub fn ledger(&self) -> Ledger {
        Ledger {
            taken_at: self.now,
            jobs: self.jobs.values().cloned().collect(),
        }
    }

    pub fn command_log(&self) -> &[CommandLogEntry] {
        &self.log
    }

    /// Log entries with `seq >= from`.
    pub fn log_since(&self, from: u64) -> &[CommandLogEntry] {
        let start = self.log.partition_point(|e| e.seq < from);
        &self.log[start..]
    }

    pub fn next_seq(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn write_file(&mut self, path: impl Into<String>, content: impl Into<String>) {
        self.files.insert(
            path.into(),
            SimFile {
                content: content.into(),
                readable: true,
            },
        );
    }

    pub fn append_file(&mut self, path: &str, content: &str) {
        self.files
            .entry(path.to_string())
            .or_insert_with(|| SimFile {
                content: String::new(),
                readable: true,
            })
            .content
            .push_str(content);
    }

    pub fn set_unreadable(&mut self, path: &str) {
        if let Some(f) = self.files.get_mut(path) {
            f.readable = false;
        }
    }

    /// Move the clock forward and apply every start and end that falls in
    /// `(now, now + secs]`. Transitions come back ordered by time, then id.
    pub fn advance_clock(&mut self, secs: u64) -> Vec<Transition> {
        let target = self.now + TimeDelta::seconds(secs as i64);
        self.ticks += 1;
        let mut out = Vec::new();
        for job in self.jobs.values_mut() {
            if job.state == JobStatus::Queued && job.planned_start <= target {
                let at = job.planned_start;
                job.started_at = Some(at);
                out.push(job.transition(at, JobStatus::Running));
            }
            if job.state == JobStatus::Running {
                let start = job.started_at.expect("running job has a start");
                let end = start + TimeDelta::seconds(job.run_secs as i64);
                if end <= target {
                    let (to, exit) = match job.outcome {
                        Outcome::Success => (JobStatus::Completed, 0),
                        Outcome::Failure => (JobStatus::Error, FAILURE_EXIT),
                        Outcome::MemoryKill => (JobStatus::Error, MEMORY_KILL_EXIT),
                    };
                    job.ended_at = Some(end);
                    job.exit_code = Some(exit);
                    job.finished_tick = Some(self.ticks);
                    out.push(job.transition(end, to));
                }
            }
        }
        self.now = target;
        out.sort_by_key(|t| (t.at, t.job_id));
        out
    }

    /// Record a command that never returns because the cluster is stalled.
    pub fn record_stall(&mut self, user: &str, argv: &CommandLine) {
        self.push_log(user, argv, None);
    }

    fn push_log(&mut self, user: &str, argv: &CommandLine, exit_code: Option<i32>) {
        self.log.push(CommandLogEntry {
            seq: self.log.len() as u64,
            at: self.now,
            user: user.to_string(),
            argv: argv.clone(),
            exit_code,
        });
    }

    /// Run one command as `user` at the current sim time. Every call is
    /// appended to the command log.
    pub fn handle_command(&mut self, user: &str, argv: &CommandLine) -> ExecResult {
        let result = self.dispatch(user, argv);
        self.push_log(user, argv, Some(result.exit_code));
        result
    }

    fn dispatch(&mut self, user: &str, argv: &CommandLine) -> ExecResult {
        let args: Vec<&str> = argv.args().iter().map(String::as_str).collect();
        match (argv.program().unwrap_or(""), args.as_slice()) {
            ("qstat", []) => self.qstat_list(Some(user)),
            ("qstat", ["-u", "*"]) => self.qstat_list(None),
            ("qstat", ["-u", who]) => self.qstat_list(Some(who)),
            ("qstat", ["-j", id]) => self.qstat_detail(id),
            ("qsub", rest) => self.qsub(user, rest),
            ("qdel", [id]) => self.qdel(user, id),
            ("qacct", ["-j", id]) => self.qacct(id),
            ("tail", ["-n", n, "--", path] | ["-n", n, path]) => match n.parse::<usize>() {
                Ok(n) => self.read(path, "tail", Some(n)),
                Err(_) => ExecResult::failure(1, format!("tail: invalid number of lines: '{n}'\n")),
            },
            ("cat", ["--", path] | [path]) => self.read(path, "cat", None),
            (program, _) => ExecResult::failure(127, format!("{program}: command not found\n")),
        }
    }

    fn qstat_list(&self, user: Option<&str>) -> ExecResult {
        let rows: Vec<JobSummary> = self
            .live_jobs()
            .filter(|j| user.is_none_or(|u| j.owner == u))
            .map(SimJob::summary)
            .collect();
        ExecResult::success(emit::emit_list(&rows))
    }

    fn qstat_detail(&self, id: &str) -> ExecResult {
        match id.parse::<u64>().ok().and_then(|id| self.jobs.get(&id)) {
            Some(job) if job.is_live() => ExecResult::success(emit::emit_detail(
                &job.detail(self.now, self.config.walltime_secs),
                job.state == JobStatus::Running,
            )),
            _ => ExecResult::failure(1, format!("Following jobs do not exist: \n{id}\n")),
        }
    }

    fn qdel(&mut self, user: &str, id: &str) -> ExecResult {
        let missing = || ExecResult::failure(1, format!("denied: job \"{id}\" does not exist\n"));
        let Some(job) = id.parse::<u64>().ok().and_then(|id| self.jobs.get_mut(&id)) else {
            return missing();
        };
        if !job.is_live() {
            return missing();
        }
        if job.owner != user {
            return ExecResult::failure(
                1,
                format!("{user} - you do not have the necessary privileges to delete the job \"{id}\"\n"),
            );
        }
        let was_running = job.state == JobStatus::Running;
        job.deleted = true;
        job.ended_at = Some(self.now);
        job.exit_code = Some(if was_running { MEMORY_KILL_EXIT } else { 0 });
        job.finished_tick = Some(self.ticks);
        job.transition(self.now, JobStatus::Deleted);
        if was_running {
            ExecResult::success(format!("{user} has registered the job {id} for deletion\n"))
        } else {
            ExecResult::success(format!("{user} has deleted job {id}\n"))
        }
    }

    fn qacct(&self, id: &str) -> ExecResult {
        let Ok(job_id) = id.parse::<u64>() else {
            return ExecResult::failure(1, format!("error: job id {id} not found\n"));
        };
        let ready = self.jobs.get(&job_id).and_then(|job| {
            let tick = job.finished_tick?;
            (self.config.accounting_available && self.ticks - tick >= self.config.accounting_lag)
                .then(|| job.accounting())
                .flatten()
        });
        match ready {
            Some(record) => ExecResult::success(emit::emit_accounting(&record)),
            None => ExecResult::failure(1, accounting_missing(job_id)),
        }
    }

    fn file_content(&self, path: &str) -> Result<String, &'static str> {
        if let Some(f) = self.files.get(path) {
            return if f.readable { Ok(f.content.clone()) } else { Err("Permission denied") };
        }
        for job in self.jobs.values().filter(|j| j.started_at.is_some()) {
            let lines = if job.output_path == path {
                job.output_lines(self.now)
            } else if job.error_path == path {
                job.error_lines(self.now)
            } else {
                continue;
            };
            return Ok(lines.into_iter().map(|l| l + "\n").collect());
        }
        Err("No such file or directory")
    }

    fn read(&self, path: &str, program: &str, last: Option<usize>) -> ExecResult {
        match self.file_content(path) {
            Ok(content) => match last {
                None => ExecResult::success(content),
                Some(n) => {
                    let lines: Vec<&str> = content.split_inclusive('\n').collect();
                    ExecResult::success(lines[lines.len().saturating_sub(n)..].concat())
                }
            },
            Err(reason) => {
                let what = if program == "tail" {
                    format!("tail: cannot open '{path}' for reading: {reason}\n")
                } else {
                    format!("cat: {path}: {reason}\n")
                };
                ExecResult::failure(1, what)
            }
        }
    }

    fn qsub(&mut self, user: &str, args: &[&str]) -> ExecResult {
        match self.parse_qsub(user, args) {
            Ok((spec, error_path)) => {
                let id = self.submit(user, spec, error_path, args);
                ExecResult::success(submit_ack(id, &self.jobs[&id].spec.job_name))
            }
            Err(msg) => ExecResult::failure(1, format!("qsub: {msg}\n")),
        }
    }

    fn parse_qsub(&self, user: &str, args: &[&str]) -> Result<(SubmitSpec, Option<String>), String> {
        let home = format!("/home/{user}");
        let (mut name, mut workdir, mut out, mut err) = (None, None, None, None);
        let mut memory = None;
        let mut cores = None;
        let mut it = args.iter().copied();
        let mut script = None;
        while let Some(arg) = it.next() {
            let mut value = |flag: &str| it.next().ok_or(format!("option {flag} requires an argument"));
            match arg {
                "-N" => name = Some(value(arg)?.to_string()),
                "-wd" => workdir = Some(value(arg)?.to_string()),
                "-cwd" => workdir = Some(home.clone()),
                "-o" => out = Some(value(arg)?.to_string()),
                "-e" => err = Some(value(arg)?.to_string()),
                "-q" | "-j" => {
                    value(arg)?;
                }
                "-V" => {}
                "-l" => {
                    for item in value(arg)?.split(',') {
                        if let Some((k, v)) = item.split_once('=') {
                            if k == MEMORY_RESOURCE {
                                memory = Some(v.to_string());
                            }
                        }
                    }
                }
                "-pe" => {
                    value(arg)?;
                    let n = value(arg)?;
                    cores = Some(n.parse::<u32>().map_err(|_| format!("bad slot count {n:?}"))?);
                }
                flag if flag.starts_with('-') => return Err(format!("unknown option {flag:?}")),
                path => {
                    script = Some(path.to_string());
                    break;
                }
            }
        }
        let script = script.ok_or("no script file given")?;
        let workdir = workdir.unwrap_or(home);
        let script_path = if script.starts_with('/') {
            script
        } else {
            format!("{}/{script}", workdir.trim_end_matches('/'))
        };
        let job_name = name.unwrap_or_else(|| {
            script_path.rsplit('/').next().unwrap_or("job").to_string()
        });
        let spec = SubmitSpec {
            job_name,
            script_path,
            source_directory: workdir,
            memory_requested: memory.unwrap_or_else(|| self.config.default_memory.clone()),
            cores: cores.unwrap_or(1),
            parallel: cores.is_some(),
            output_path: out,
            extra_args: Vec::new(),
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok((spec, err))
    }

    fn submit(&mut self, user: &str, spec: SubmitSpec, error_path: Option<String>, args: &[&str]) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let cfg = &self.config;
        let rng = &mut self.rng;

        let delay = rng.random_range(cfg.queue_delay.0..=cfg.queue_delay.1);
        let mut run_secs = rng.random_range(cfg.run_duration.0..=cfg.run_duration.1);
        let outcome = if rng.random_bool(cfg.failure_rate) {
            if rng.random_bool(cfg.memory_kill_share) {
                Outcome::MemoryKill
            } else {
                Outcome::Failure
            }
        } else {
            Outcome::Success
        };
        let node = format!("node{:02}", rng.random_range(1..=cfg.nodes));
        let warns = rng.random_bool(cfg.warning_rate);

        let limit = parse_bytes(&spec.memory_requested).expect("validated");
        let steps = rng.random_range(1..=4u64);
        let lo = (limit / 8).max(1);
        let hi = (limit / 8 * 7).max(lo);
        let mut levels: Vec<u64> = (0..steps)
            .map(|_| {
                let v = rng.random_range(lo..=hi);
                if v >= MIB { v - v % MIB } else { v }
            })
            .collect();
        levels.sort_unstable();
        let mut memory_curve: Vec<(u64, u64)> = levels
            .into_iter()
            .enumerate()
            .map(|(i, bytes)| (i as u64 * run_secs / (steps + 1), bytes))
            .collect();
        if outcome == Outcome::MemoryKill {
            let kill_at = steps * run_secs / (steps + 1);
            memory_curve.push((kill_at, limit + MIB * rng.random_range(1..=16)));
            run_secs = kill_at;
        }

        let output_path = spec
            .output_path
            .clone()
            .unwrap_or_else(|| self.adapter.default_output_path(&spec, id));
        let error_path = error_path.unwrap_or_else(|| self.adapter.default_error_path(&spec, id));
        let mut command = CommandLine::new(["qsub"]);
        let mut tokens = command.tokens().to_vec();
        tokens.extend(args.iter().map(|a| a.to_string()));
        command = CommandLine::from(tokens);

        let submit_at = self.now;
        let job = SimJob {
            job_id: id,
            owner: user.to_string(),
            output_path,
            error_path,
            submit_command: command.to_shell_string(),
            node,
            state: JobStatus::Queued,
            submit_at,
            planned_start: submit_at + TimeDelta::seconds(delay as i64),
            run_secs,
            outcome,
            started_at: None,
            ended_at: None,
            memory_curve,
            exit_code: None,
            deleted: false,
            warns,
            finished_tick: None,
            history: vec![Transition {
                at: submit_at,
                job_id: id,
                from: None,
                to: JobStatus::Queued,
            }],
            spec,
        };
        self.jobs.insert(id, job);
        id
    }
}
