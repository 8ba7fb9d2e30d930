//! Server configuration.
//!
//! Sources are applied in order: built-in defaults, the TOML file, then
//! environment variables of the form `JOBWATCH_<SECTION>__<KEY>` (for example
//! `JOBWATCH_POLL__INTERVAL_SECONDS=15`), then command-line flags. Values in
//! the environment are read as TOML literals when they parse as one and as
//! plain strings otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::TimeDelta;
use jobwatch_core::gateway::{GatewayConfig, LimiterConfig};
use jobwatch_core::poller::PollConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "JOBWATCH_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Run scheduler commands on a login node over SSH.
    Ssh,
    /// Run scheduler commands as local processes.
    Exec,
    /// Drive the built-in simulated cluster.
    Sim,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Ssh => "ssh",
            TransportKind::Exec => "exec",
            TransportKind::Sim => "sim",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub server: ServerSection,
    pub limiter: LimiterSection,
    pub cache: CacheSection,
    pub poll: PollConfig,
    pub auth: AuthSection,
    pub sim: SimSection,
    pub analytics: AnalyticsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    pub port: u16,
    pub transport: TransportKind,
    /// Archive location. Ignored by the simulated cluster, which keeps its
    /// archive in memory.
    pub db: PathBuf,
    pub key_dir: PathBuf,
    pub known_hosts: PathBuf,
    pub kdf_iterations: u32,
    pub command_timeout_seconds: u64,
    /// Stored key the poller uses. Its passphrase comes from
    /// `JOBWATCH_MONITOR_PASSPHRASE`.
    pub monitor_key: Option<String>,
    /// Principals that may see every user's jobs and the diagnostics.
    pub admins: Vec<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            transport: TransportKind::Sim,
            db: "jobwatch.db".into(),
            key_dir: "keys".into(),
            known_hosts: "known_hosts".into(),
            kdf_iterations: 200_000,
            command_timeout_seconds: 30,
            monitor_key: None,
            admins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimiterSection {
    pub threshold: u32,
    pub window_seconds: u64,
    pub backoff_base_seconds: u64,
    pub backoff_cap_seconds: u64,
    /// Budget of the background poller, per window.
    pub system_threshold: u32,
}

impl Default for LimiterSection {
    fn default() -> Self {
        Self {
            threshold: 10,
            window_seconds: 10,
            backoff_base_seconds: 1,
            backoff_cap_seconds: 64,
            system_threshold: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub ttl_seconds: u64,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self { ttl_seconds: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthSection {
    pub session_ttl_seconds: u64,
    /// User name to hex SHA-256 of that user's login token.
    pub local_tokens: BTreeMap<String, String>,
    /// Shared secret for signed identity assertions. Usually supplied as
    /// `JOBWATCH_AUTH__ASSERTION_SECRET`.
    pub assertion_secret: Option<String>,
    /// Longest accepted assertion lifetime.
    pub assertion_max_age_seconds: u64,
}

impl Default for AuthSection {
    fn default() -> Self {
        Self {
            session_ttl_seconds: 8 * 3600,
            local_tokens: BTreeMap::new(),
            assertion_secret: None,
            assertion_max_age_seconds: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub seed: u64,
    /// Simulated seconds per wall-clock second.
    pub speed: u64,
    pub failure_rate: f64,
    pub accounting_lag: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            seed: 1,
            speed: 1,
            failure_rate: 0.1,
            accounting_lag: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsSection {
    /// TOML file of tagging rules.
    pub rules: Option<PathBuf>,
    /// Tag that `/predict?tool=` selects on.
    pub group_key: String,
    /// Numeric tag used as the covariate.
    pub covariate: String,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        Self {
            rules: None,
            group_key: "tool".into(),
            covariate: "reads".into(),
        }
    }
}

impl ServerConfig {
    /// Defaults, then `path` if given, then matching variables from `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        let config: ServerConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ServerConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gateway_config()
            .limiter
            .validate()
            .map_err(ConfigError::Invalid)?;
        if self.limiter.system_threshold == 0 {
            return Err(ConfigError::Invalid("limiter.system_threshold must be at least 1".into()));
        }
        self.poll.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.auth.session_ttl_seconds == 0 {
            return Err(ConfigError::Invalid("auth.session_ttl_seconds must be at least 1".into()));
        }
        for (user, digest) in &self.auth.local_tokens {
            if hex::decode(digest).map_or(true, |d| d.len() != 32) {
                return Err(ConfigError::Invalid(format!(
                    "auth.local_tokens.{user} must be a hex SHA-256 digest"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.sim.failure_rate) {
            return Err(ConfigError::Invalid("sim.failure_rate must lie in [0, 1]".into()));
        }
        if self.sim.speed == 0 {
            return Err(ConfigError::Invalid("sim.speed must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        let l = &self.limiter;
        let limiter = LimiterConfig {
            threshold: l.threshold,
            window: seconds(l.window_seconds),
            backoff_base: seconds(l.backoff_base_seconds),
            backoff_cap: seconds(l.backoff_cap_seconds),
        };
        GatewayConfig {
            system_limiter: LimiterConfig {
                threshold: l.system_threshold,
                ..limiter.clone()
            },
            limiter,
            cache_ttl: seconds(self.cache.ttl_seconds),
        }
    }

    pub fn session_ttl(&self) -> TimeDelta {
        seconds(self.auth.session_ttl_seconds)
    }
}

fn seconds(s: u64) -> TimeDelta {
    TimeDelta::seconds(i64::try_from(s).unwrap_or(i64::MAX / 1000))
}

/// Merge `JOBWATCH_<SECTION>__<KEY>` variables into `table`. Variables
/// without the double underscore belong to the command line and are skipped.
pub fn apply_env(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    for (name, raw) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((section, key)) = rest.split_once("__") else {
            continue;
        };
        if section.is_empty() || key.is_empty() {
            continue;
        }
        let section = section.to_ascii_lowercase();
        let key = key.to_ascii_lowercase();
        let value = parse_env_value(&raw);
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(inner) = entry else {
            return Err(ConfigError::Parse(format!("{name}: `{section}` is not a table")));
        };
        inner.insert(key, value);
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
