//! Reference emitter for the SGE-style text grammar.
//!
//! Everything printed here must be accepted by [`crate::adapter::sge`]; the
//! constants come from there so the two cannot drift apart.

use std::fmt::Write;

use crate::adapter::memory::format_bytes;
use crate::adapter::sge::{
    acct_keys, detail_keys as k, state_token, DATE_FORMAT, LIST_HEADER, LIST_RULE, MEMORY_RESOURCE,
    STANZA_RULE,
};
use crate::adapter::{AccountingRecord, JobDetail, JobStatus, JobSummary};
use crate::duration::format_hms;

/// `qstat -u ...` output. Nothing at all (not even headers) when no jobs are
/// listed, like the real command.
pub fn emit_list(jobs: &[JobSummary]) -> String {
    if jobs.is_empty() {
        return String::new();
    }
    let mut out = format!("{LIST_HEADER}\n{LIST_RULE}\n");
    for job in jobs {
        let state = state_token(job.status).unwrap_or("u");
        let prior = if job.status == JobStatus::Queued { 0.0 } else { 0.555 };
        let _ = writeln!(
            out,
            "{:>7} {prior:.5} {:<10} {:<12} {state:<5} {} {:<30} {:>5}",
            job.job_id,
            job.job_name,
            job.user,
            job.started_or_submitted_at.format(DATE_FORMAT),
            job.queue_or_node,
            job.slots,
        );
    }
    out
}

/// `qstat -j ID` output. Usage, runtime and time remaining are only printed
/// for a running job.
pub fn emit_detail(d: &JobDetail, running: bool) -> String {
    let mut out = format!("{STANZA_RULE}\n");
    let mut field = |key: &str, value: &str| {
        let _ = writeln!(out, "{:<28}{value}", format!("{key}:"));
    };
    field(k::JOB_NUMBER, &d.job_id.to_string());
    field(k::JOB_NAME, &d.job_name);
    field(k::OWNER, &d.owner);
    field(k::WORKDIR, &d.source_directory);
    field(k::CMD, &d.submit_command);
    field(k::SCRIPT_FILE, &d.script_path);
    field(k::STDOUT_PATH, &d.output_path);
    field(k::STDERR_PATH, &d.error_path);
    field(k::HARD_RESOURCES, &format!("{MEMORY_RESOURCE}={}", d.memory_requested));
    field(k::PARALLEL, if d.parallel { "1" } else { "0" });
    field(k::SLOTS, &d.cores.to_string());
    if running {
        field(
            k::USAGE,
            &format!(
                "cpu={}, vmem={}, maxvmem={}",
                format_hms(d.cpu_time_secs),
                format_bytes(d.current_memory),
                format_bytes(d.maximum_memory)
            ),
        );
        field(k::RUNTIME, &format_hms(d.run_time_secs));
        if let Some(left) = d.time_remaining_secs {
            field(k::TIME_REMAINING, &format_hms(left));
        }
    }
    out
}

/// `qacct -j ID` output.
pub fn emit_accounting(a: &AccountingRecord) -> String {
    let mut out = format!("{STANZA_RULE}\n");
    let deleted = a.final_status == JobStatus::Deleted;
    for (key, value) in [
        (acct_keys::JOB_NUMBER, a.job_id.to_string()),
        (acct_keys::EXIT_STATUS, a.exit_code.to_string()),
        (acct_keys::DELETED, u8::from(deleted).to_string()),
        (acct_keys::RU_WALLCLOCK, a.final_run_time_secs.to_string()),
        (acct_keys::MAXVMEM, format_bytes(a.maximum_memory)),
    ] {
        let _ = writeln!(out, "{key:<13}{value}");
    }
    out
}
