//! Per-principal sliding-window limiter with exponential backoff.
//!
//! A request of cost `c` is admitted when the principal is not blocked and
//! the costs admitted in `(now - window, now]` plus `c` stay within the
//! threshold. Anything else is a violation: the violation count `k` goes up
//! and the principal is blocked until `now + min(base * 2^(k-1), cap)`. A
//! violation-free stretch of one full window resets `k`.

use std::collections::{HashMap, VecDeque};

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::Mutex;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LimiterConfig {
    pub threshold: u32,
    pub window: TimeDelta,
    pub backoff_base: TimeDelta,
    pub backoff_cap: TimeDelta,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        Self {
            threshold: 10,
            window: TimeDelta::seconds(10),
            backoff_base: TimeDelta::seconds(1),
            backoff_cap: TimeDelta::seconds(64),
        }
    }
}

impl LimiterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.threshold == 0 {
            return Err("threshold must be at least 1".into());
        }
        if self.window <= TimeDelta::zero() || self.backoff_base <= TimeDelta::zero() {
            return Err("window and backoff base must be positive".into());
        }
        if self.backoff_cap < self.backoff_base {
            return Err("backoff cap must not be below the base".into());
        }
        Ok(())
    }

    /// `min(base * 2^(k-1), cap)` for the k-th consecutive violation.
    pub fn backoff(&self, k: u32) -> TimeDelta {
        let base = self.backoff_base.num_milliseconds();
        let cap = self.backoff_cap.num_milliseconds();
        let shift = k.saturating_sub(1);
        let ms = if shift >= 63 {
            cap
        } else {
            base.checked_mul(1i64 << shift).map_or(cap, |v| v.min(cap))
        };
        TimeDelta::milliseconds(ms)
    }
}

/// Limiter bookkeeping for one principal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ThrottleState {
    pub principal: String,
    pub window_start: DateTime<Utc>,
    pub count_in_window: u32,
    pub consecutive_violations: u32,
    pub blocked_until: Option<DateTime<Utc>>,
    pub last_violation: Option<DateTime<Utc>>,
    #[serde(skip)]
    admitted: VecDeque<(DateTime<Utc>, u32)>,
}

impl ThrottleState {
    fn new(principal: &str, now: DateTime<Utc>) -> Self {
        Self {
            principal: principal.to_string(),
            window_start: now,
            count_in_window: 0,
            consecutive_violations: 0,
            blocked_until: None,
            last_violation: None,
            admitted: VecDeque::new(),
        }
    }

    fn roll(&mut self, now: DateTime<Utc>, window: TimeDelta) {
        let start = now - window;
        while self.admitted.front().is_some_and(|(t, _)| *t <= start) {
            self.admitted.pop_front();
        }
        self.window_start = start;
        self.count_in_window = self.admitted.iter().map(|(_, c)| c).sum();
        if self.last_violation.is_some_and(|v| now - v >= window) {
            self.consecutive_violations = 0;
            self.blocked_until = None;
            self.last_violation = None;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Admit,
    /// Over budget. `retry_after` is `blocked_until - now`.
    Violation {
        retry_after: TimeDelta,
        blocked_until: DateTime<Utc>,
        violations: u32,
    },
}

pub struct RateLimiter {
    default: LimiterConfig,
    overrides: HashMap<String, LimiterConfig>,
    states: Mutex<HashMap<String, ThrottleState>>,
}

impl RateLimiter {
    pub fn new(default: LimiterConfig) -> Self {
        Self {
            default,
            overrides: HashMap::new(),
            states: Mutex::new(HashMap::new()),
        }
    }

    /// Give one principal its own budget.
    pub fn with_override(mut self, principal: impl Into<String>, config: LimiterConfig) -> Self {
        self.overrides.insert(principal.into(), config);
        self
    }

    pub fn config_for(&self, principal: &str) -> &LimiterConfig {
        self.overrides.get(principal).unwrap_or(&self.default)
    }

    /// Atomically decide on, and account for, a request of `cost` commands.
    pub fn check(&self, principal: &str, cost: u32, now: DateTime<Utc>) -> Verdict {
        let config = self.config_for(principal).clone();
        let mut states = self.states.lock();
        let state = states
            .entry(principal.to_string())
            .or_insert_with(|| ThrottleState::new(principal, now));
        state.roll(now, config.window);

        let blocked = state.blocked_until.is_some_and(|until| now < until);
        if !blocked && state.count_in_window.saturating_add(cost) <= config.threshold {
            state.admitted.push_back((now, cost));
            state.count_in_window += cost;
            return Verdict::Admit;
        }
        state.consecutive_violations = state.consecutive_violations.saturating_add(1);
        let until = now + config.backoff(state.consecutive_violations);
        state.blocked_until = Some(until);
        state.last_violation = Some(now);
        Verdict::Violation {
            retry_after: until - now,
            blocked_until: until,
            violations: state.consecutive_violations,
        }
    }

    pub fn state(&self, principal: &str) -> Option<ThrottleState> {
        self.states.lock().get(principal).cloned()
    }

    pub fn states(&self) -> Vec<ThrottleState> {
        let mut all: Vec<_> = self.states.lock().values().cloned().collect();
        all.sort_by(|a, b| a.principal.cmp(&b.principal));
        all
    }
}
