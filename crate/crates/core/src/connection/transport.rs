//! Command transports: local processes and the in-process simulator. SSH is
//! in [`super::ssh`].

use std::process::Stdio;
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{CommandLine, ExecResult};
use crate::sim::SimCluster;

/// Where a command runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub user: String,
    pub host: String,
    pub port: u16,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("could not connect to {host}:{port}: {reason}")]
    Connect { host: String, port: u16, reason: String },
    #[error("authentication failed for {user}@{host}: {reason}")]
    Auth { user: String, host: String, reason: String },
    #[error("transport error: {0}")]
    Other(String),
}

#[async_trait]
pub trait Transport: Send + Sync {
    fn name(&self) -> &'static str;

    /// Run `command` and capture its output. A nonzero exit status is a
    /// successful execution; only failures to run at all are errors.
    async fn execute(
        &self,
        target: &Target,
        key: &[u8],
        command: &CommandLine,
    ) -> Result<ExecResult, TransportError>;
}

/// Runs commands as local child processes, ignoring the target and key.
#[derive(Debug, Default, Clone)]
pub struct ExecTransport;

#[async_trait]
impl Transport for ExecTransport {
    fn name(&self) -> &'static str {
        "exec"
    }

    async fn execute(
        &self,
        _target: &Target,
        _key: &[u8],
        command: &CommandLine,
    ) -> Result<ExecResult, TransportError> {
        let program = command
            .program()
            .ok_or_else(|| TransportError::Other("empty command".into()))?;
        let started = Instant::now();
        let output = tokio::process::Command::new(program)
            .args(command.args())
            .stdin(Stdio::null())
            .kill_on_drop(true)
            .output()
            .await
            .map_err(|e| TransportError::Other(format!("{program}: {e}")))?;
        Ok(ExecResult {
            stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
            // Killed by a signal: report it the way a shell would.
            exit_code: output.status.code().unwrap_or(128 + signal_of(&output.status)),
            elapsed: started.elapsed(),
        })
    }
}

#[cfg(unix)]
fn signal_of(status: &std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.signal().unwrap_or(0)
}

#[cfg(not(unix))]
fn signal_of(_: &std::process::ExitStatus) -> i32 {
    0
}

/// Sends commands to a shared [`SimCluster`], running them as the target's
/// user. While the simulator is stalled, commands are logged and then never
/// answer.
#[derive(Clone)]
pub struct SimTransport {
    sim: Arc<Mutex<SimCluster>>,
}

impl SimTransport {
    pub fn new(sim: Arc<Mutex<SimCluster>>) -> Self {
        Self { sim }
    }

    pub fn sim(&self) -> &Arc<Mutex<SimCluster>> {
        &self.sim
    }
}

#[async_trait]
impl Transport for SimTransport {
    fn name(&self) -> &'static str {
        "sim"
    }

    async fn execute(
        &self,
        target: &Target,
        _key: &[u8],
        command: &CommandLine,
    ) -> Result<ExecResult, TransportError> {
        {
            let mut sim = self.sim.lock();
            if !sim.stalled() {
                return Ok(sim.handle_command(&target.user, command));
            }
            sim.record_stall(&target.user, command);
        }
        std::future::pending().await
    }
}
