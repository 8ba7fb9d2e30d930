//! `jobwatch`: the monitor's server and maintenance commands.
//!
//! Global flags may also be set through `JOBWATCH_CONFIG`, `JOBWATCH_PORT`,
//! `JOBWATCH_TRANSPORT` and `JOBWATCH_DB`. Any configuration key can be
//! overridden with `JOBWATCH_<SECTION>__<KEY>`.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{SubsecRound, Utc};
use clap::{Parser, Subcommand};
use jobwatch_core::analytics::{build_models, parse_rules, TagRule};
use jobwatch_core::clock::{Clock, SystemClock};
use jobwatch_core::connection::keystore::MIN_ITERATIONS;
use jobwatch_core::connection::{CredentialStore, ExecTransport, KeyId, SshTransport, Transport};
use jobwatch_core::gateway::SYSTEM_PRINCIPAL;
use jobwatch_core::poller::Poller;
use jobwatch_core::sim::SimConfig;
use jobwatch_core::stack::{SimStack, Stack};
use jobwatch_core::store::JobStore;
use jobwatch_core::SgeAdapter;
use jobwatch_server::api::AnalyticsSettings;
use jobwatch_server::auth::{token_digest, AssertionProvider, Authenticator, LocalTokenProvider, SessionStore};
use jobwatch_server::config::TransportKind;
use jobwatch_server::{router, AppState, Backend, ServerConfig};
use tracing_subscriber::EnvFilter;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "jobwatch", version, about = "Self-hosted batch cluster job monitor")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "JOBWATCH_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "JOBWATCH_PORT")]
    port: Option<u16>,
    #[arg(long, global = true, value_enum, env = "JOBWATCH_TRANSPORT")]
    transport: Option<TransportKind>,
    /// Job archive (SQLite).
    #[arg(long, global = true, env = "JOBWATCH_DB")]
    db: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP server (the default).
    Serve,
    /// Manage stored cluster keys.
    #[command(subcommand)]
    Keys(KeysCommand),
    /// Resource-usage models.
    #[command(subcommand)]
    Analytics(AnalyticsCommand),
    /// Write the archive as CSV to stdout.
    Export,
    /// Print the SHA-256 digest of a login token read from stdin, for
    /// `auth.local_tokens`.
    HashToken,
}

#[derive(Debug, Subcommand)]
enum KeysCommand {
    /// Encrypt and store a private key. The passphrase is read from
    /// `JOBWATCH_KEY_PASSPHRASE` or the first line of stdin.
    Add {
        #[arg(long)]
        user: String,
        #[arg(long)]
        host: String,
        #[arg(long, default_value_t = 22)]
        port: u16,
        #[arg(long)]
        file: PathBuf,
    },
    List,
    Revoke { fingerprint: String },
}

#[derive(Debug, Subcommand)]
enum AnalyticsCommand {
    /// Fit models over the archive and print them as CSV.
    Fit {
        /// Tagging rules; defaults to `analytics.rules`.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Comma-separated grouping tags; defaults to `analytics.group_key`.
        #[arg(long, value_delimiter = ',')]
        group: Vec<String>,
        #[arg(long)]
        covariate: Option<String>,
        /// Also write per-job scatter data here.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
}

fn main() -> Result<(), BoxError> {
    let cli = Cli::parse();
    let mut config = ServerConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(port) = cli.port {
        config.server.port = port;
    }
    if let Some(transport) = cli.transport {
        config.server.transport = transport;
    }
    if let Some(db) = cli.db {
        config.server.db = db;
    }
    match cli.command.unwrap_or(Command::Serve) {
        Command::Serve => {
            tracing_subscriber::fmt()
                .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
                .init();
            tokio::runtime::Runtime::new()?.block_on(serve(config))
        }
        Command::Keys(cmd) => keys(&config, cmd),
        Command::Analytics(AnalyticsCommand::Fit {
            rules,
            group,
            covariate,
            scatter,
        }) => {
            let store = JobStore::open(&config.server.db)?;
            let rules = load_rules(rules.as_deref().or(config.analytics.rules.as_deref()))?;
            let group = if group.is_empty() { vec![config.analytics.group_key.clone()] } else { group };
            let covariate = covariate.unwrap_or_else(|| config.analytics.covariate.clone());
            let models = build_models(&store, &rules, &group, &covariate)?;
            for skip in &models.skipped {
                eprintln!("skipped {} {}: {} (n = {})", skip.group, skip.metric, skip.reason, skip.n);
            }
            models.write_models_csv(std::io::stdout().lock())?;
            if let Some(path) = scatter {
                models.write_scatter_csv(std::fs::File::create(path)?)?;
            }
            Ok(())
        }
        Command::Export => {
            let store = JobStore::open(&config.server.db)?;
            store.export_csv(std::io::stdout().lock())?;
            Ok(())
        }
        Command::HashToken => {
            let token = read_secret_line()?;
            println!("{}", hex::encode(token_digest(&token)));
            Ok(())
        }
    }
}

fn read_secret_line() -> Result<String, BoxError> {
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    Ok(line.trim_end_matches(['\r', '\n']).to_string())
}

fn load_rules(path: Option<&Path>) -> Result<Vec<TagRule>, BoxError> {
    match path {
        Some(p) => Ok(parse_rules(&std::fs::read_to_string(p)?)?),
        None => Ok(Vec::new()),
    }
}

fn keys(config: &ServerConfig, cmd: KeysCommand) -> Result<(), BoxError> {
    let store = CredentialStore::open(&config.server.key_dir, config.server.kdf_iterations)?;
    let mut out = std::io::stdout().lock();
    match cmd {
        KeysCommand::Add { user, host, port, file } => {
            let material = std::fs::read(&file)?;
            let passphrase = match std::env::var("JOBWATCH_KEY_PASSPHRASE") {
                Ok(p) => p,
                Err(_) => read_secret_line()?,
            };
            let id = store.store_key(&material, &passphrase, &user, &host, port)?;
            writeln!(out, "{id}")?;
        }
        KeysCommand::List => {
            for c in store.credentials() {
                let revoked = if store.is_revoked(&c.fingerprint) { " revoked" } else { "" };
                writeln!(out, "{}\t{}@{}:{}\t{}{revoked}", c.key_id, c.user, c.host, c.port, c.fingerprint)?;
            }
        }
        KeysCommand::Revoke { fingerprint } => {
            store.revoke_key(&fingerprint, Utc::now())?;
            writeln!(out, "revoked {fingerprint}")?;
        }
    }
    Ok(())
}

fn authenticator(config: &ServerConfig) -> Result<Authenticator, BoxError> {
    let mut auth = Authenticator::default();
    if !config.auth.local_tokens.is_empty() {
        auth = auth.with(LocalTokenProvider::from_hex(&config.auth.local_tokens)?);
    }
    if let Some(secret) = &config.auth.assertion_secret {
        let max_age = chrono::TimeDelta::seconds(config.auth.assertion_max_age_seconds as i64);
        auth = auth.with(AssertionProvider::new(secret.as_bytes().to_vec(), max_age));
    }
    if auth.methods().is_empty() {
        tracing::warn!("no login method is configured; every login will fail");
    }
    Ok(auth)
}

async fn serve(config: ServerConfig) -> Result<(), BoxError> {
    let auth = authenticator(&config)?;
    let sessions = SessionStore::new(config.session_ttl());
    let analytics = AnalyticsSettings {
        rules: load_rules(config.analytics.rules.as_deref())?,
        group_key: config.analytics.group_key.clone(),
        covariate: config.analytics.covariate.clone(),
    };
    let (shutdown_tx, shutdown_rx) = tokio::sync::watch::channel(false);
    // Keeps the simulated cluster's key files alive while serving.
    let mut _sim_keys = None;

    let (state, clock): (AppState, Arc<dyn Clock>) = match config.server.transport {
        TransportKind::Sim => {
            let dir = tempfile::tempdir()?;
            let sim_cfg = SimConfig {
                seed: config.sim.seed,
                failure_rate: config.sim.failure_rate,
                accounting_lag: config.sim.accounting_lag,
                epoch: Utc::now().trunc_subsecs(0),
                ..SimConfig::default()
            };
            let path = dir.path().to_path_buf();
            let gateway_cfg = config.gateway_config();
            let poll = config.poll.clone();
            let sim = tokio::task::spawn_blocking(move || {
                SimStack::new(sim_cfg, gateway_cfg, poll, &path, MIN_ITERATIONS, &[])
            })
            .await??;
            _sim_keys = Some(dir);
            let sim = Arc::new(sim);
            let ticker = sim.clone();
            let speed = config.sim.speed;
            let mut stop = shutdown_rx.clone();
            tokio::spawn(async move {
                let mut every = tokio::time::interval(Duration::from_secs(1));
                loop {
                    tokio::select! {
                        _ = every.tick() => { ticker.advance(speed); }
                        _ = stop.changed() => break,
                    }
                }
            });
            let clock: Arc<dyn Clock> = Arc::new(sim.clock.clone());
            (AppState::for_sim(sim, auth, sessions), clock)
        }
        kind => {
            let transport: Arc<dyn Transport> = match kind {
                TransportKind::Ssh => Arc::new(SshTransport::new(&config.server.known_hosts)),
                _ => Arc::new(ExecTransport),
            };
            let keys = Arc::new(CredentialStore::open(&config.server.key_dir, config.server.kdf_iterations)?);
            let store = Arc::new(JobStore::open(&config.server.db)?);
            let stack = Stack::new(
                Arc::new(SgeAdapter::new()),
                transport,
                keys,
                store,
                config.gateway_config(),
                config.poll.clone(),
                Duration::from_secs(config.server.command_timeout_seconds),
            )?;
            bind_monitor_key(&config, &stack)?;
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            (AppState::new(&stack, clock.clone(), Backend::Cluster, auth, sessions), clock)
        }
    };
    let state = Arc::new(
        state
            .with_admins(config.server.admins.iter().cloned())
            .with_analytics(analytics),
    );

    if config.poll.enabled && state.gateway.credential_for(SYSTEM_PRINCIPAL).is_ok() {
        let poller: Arc<Poller> = state.poller.clone();
        tokio::spawn(poller.run(clock, shutdown_rx.clone()));
    } else {
        tracing::warn!("background polling is off");
    }

    let addr = format!("{}:{}", config.server.bind, config.server.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, transport = config.server.transport.name(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            let _ = shutdown_tx.send(true);
        })
        .await?;
    Ok(())
}

/// Unlock the poller's key when one is configured.
fn bind_monitor_key(config: &ServerConfig, stack: &Stack) -> Result<(), BoxError> {
    let Some(id) = &config.server.monitor_key else {
        return Ok(());
    };
    let Ok(passphrase) = std::env::var("JOBWATCH_MONITOR_PASSPHRASE") else {
        tracing::warn!("server.monitor_key is set but JOBWATCH_MONITOR_PASSPHRASE is not");
        return Ok(());
    };
    let key = KeyId(id.clone());
    stack.connections.unlock(&key, &passphrase)?;
    stack.gateway.bind_credential(SYSTEM_PRINCIPAL, key);
    Ok(())
}
