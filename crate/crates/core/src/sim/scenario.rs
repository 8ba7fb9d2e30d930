//! Scripted simulator runs.
//!
//! A scenario file is a JSON list of steps, each `{"at": SECONDS, "action": ...}`
//! where `at` counts seconds from the simulator epoch and the action is either
//! `{"command": {"user": "alice", "argv": ["qstat", "-u", "*"]}}` or
//! `{"advance": SECONDS}`. Steps must be ordered by `at`; the clock is moved
//! forward to `at` before each step runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{SimCluster, Transition};
use crate::command::{CommandLine, ExecResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Command { user: String, argv: CommandLine },
    Advance(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub at: u64,
    pub action: Action,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("step {index} at {at}s is earlier than the simulator clock ({clock}s)")]
    OutOfOrder { index: usize, at: u64, clock: u64 },
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub results: Vec<ExecResult>,
    pub transitions: Vec<Transition>,
}

pub fn parse(text: &str) -> Result<Vec<Step>, ScenarioError> {
    Ok(serde_json::from_str(text)?)
}

pub fn run(sim: &mut SimCluster, steps: &[Step]) -> Result<ScenarioOutcome, ScenarioError> {
    let mut outcome = ScenarioOutcome::default();
    for (index, step) in steps.iter().enumerate() {
        let clock = (sim.now() - sim.config().epoch).num_seconds() as u64;
        if step.at < clock {
            return Err(ScenarioError::OutOfOrder { index, at: step.at, clock });
        }
        if step.at > clock {
            outcome.transitions.extend(sim.advance_clock(step.at - clock));
        }
        match &step.action {
            Action::Command { user, argv } => outcome.results.push(sim.handle_command(user, argv)),
            Action::Advance(secs) => outcome.transitions.extend(sim.advance_clock(*secs)),
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;

    const SCRIPT: &str = r#"[
        {"at": 0, "action": {"command": {"user": "alice", "argv": ["qsub", "-N", "a", "/home/alice/a.sh"]}}},
        {"at": 30, "action": {"command": {"user": "bob", "argv": ["qsub", "-N", "b", "/home/bob/b.sh"]}}},
        {"at": 30, "action": {"advance": 4000}},
        {"at": 4100, "action": {"command": {"user": "alice", "argv": ["qacct", "-j", "101"]}}}
    ]"#;

    #[test]
    fn replay_is_deterministic() {
        let steps = parse(SCRIPT).unwrap();
        let go = || {
            let mut sim = SimCluster::new(SimConfig { seed: 3, ..SimConfig::default() });
            let out = run(&mut sim, &steps).unwrap();
            (out, sim.ledger())
        };
        let (a, la) = go();
        let (b, lb) = go();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.results.len(), 3);
        assert!(a.results[2].is_success());
    }

    #[test]
    fn rejects_backwards_time() {
        let steps = parse(r#"[{"at": 10, "action": {"advance": 5}}, {"at": 12, "action": {"advance": 1}}]"#).unwrap();
        let mut sim = SimCluster::new(SimConfig::default());
        assert!(matches!(run(&mut sim, &steps), Err(ScenarioError::OutOfOrder { index: 1, .. })));
    }
}
