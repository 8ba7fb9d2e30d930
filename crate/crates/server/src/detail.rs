//! Warning and error lines pulled from a job's error log.

use std::sync::LazyLock;

use regex::Regex;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct LogFinding {
    pub severity: Severity,
    /// 1-based line number within the log.
    pub line: usize,
    pub text: String,
}

static ERROR_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\berror\b").unwrap());
static WARNING_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(?:warning|warn)\b").unwrap());

/// Lines mentioning the whole word "error" (case-insensitive) are errors;
/// otherwise lines with "warning" or "warn" are warnings. File order.
pub fn scan_log(text: &str) -> Vec<LogFinding> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let severity = if ERROR_WORD.is_match(line) {
                Severity::Error
            } else if WARNING_WORD.is_match(line) {
                Severity::Warning
            } else {
                return None;
            };
            Some(LogFinding {
                severity,
                line: i + 1,
                text: line.to_string(),
            })
        })
        .collect()
}
