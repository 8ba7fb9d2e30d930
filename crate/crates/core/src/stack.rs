//! Assembly of the full request path: adapter, transport, key store,
//! connection manager, archive, gateway and poller.
//!
//! [`SimStack`] builds the same stack on top of an in-process [`SimCluster`]
//! whose clock also drives the archive, so whole scenarios run
//! deterministically and fast.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use thiserror::Error;

use crate::adapter::{SchedulerAdapter, SgeAdapter};
use crate::clock::Clock;
use crate::connection::{ConnectionError, ConnectionManager, CredentialStore, KeyError, KeyId, SimTransport, Transport};
use crate::gateway::{Gateway, GatewayConfig, GatewayError, JobAction, JobRequest, Served, SYSTEM_PRINCIPAL};
use crate::poller::{PollConfig, PollReport, Poller};
use crate::sim::{SimCluster, SimConfig, Transition};
use crate::store::{JobStore, StoreError};

#[derive(Debug, Error)]
pub enum StackError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Connection(#[from] ConnectionError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub struct Stack {
    pub store: Arc<JobStore>,
    pub connections: Arc<ConnectionManager>,
    pub gateway: Arc<Gateway>,
    pub poller: Arc<Poller>,
}

impl Stack {
    pub fn new(
        adapter: Arc<dyn SchedulerAdapter>,
        transport: Arc<dyn Transport>,
        keys: Arc<CredentialStore>,
        store: Arc<JobStore>,
        gateway: GatewayConfig,
        poll: PollConfig,
        timeout: Duration,
    ) -> Result<Self, StackError> {
        gateway.limiter.validate().map_err(|e| StackError::Config(e.to_string()))?;
        gateway.system_limiter.validate().map_err(|e| StackError::Config(e.to_string()))?;
        poll.validate().map_err(|e| StackError::Config(e.to_string()))?;
        let connections = Arc::new(ConnectionManager::new(keys, transport, timeout));
        let gateway = Arc::new(Gateway::new(adapter, connections.clone(), store.clone(), gateway));
        let poller = Arc::new(Poller::new(gateway.clone(), poll));
        Ok(Self {
            store,
            connections,
            gateway,
            poller,
        })
    }
}

/// Reads the simulator's clock.
#[derive(Clone)]
pub struct SimClock(pub Arc<Mutex<SimCluster>>);

impl Clock for SimClock {
    fn now(&self) -> DateTime<Utc> {
        self.0.lock().now()
    }
}

pub const SIM_HOST: &str = "sim.cluster";
pub const SIM_PASSPHRASE: &str = "simulated-cluster";
/// Cluster account used by the poller.
pub const SIM_MONITOR_USER: &str = "monitor";

pub struct SimStack {
    pub sim: Arc<Mutex<SimCluster>>,
    pub clock: SimClock,
    pub stack: Stack,
    keys: Mutex<BTreeMap<String, KeyId>>,
}

impl SimStack {
    /// One stored, unlocked credential per user plus one for the poller.
    /// `key_dir` holds the encrypted key files.
    pub fn new(
        sim: SimConfig,
        gateway: GatewayConfig,
        poll: PollConfig,
        key_dir: &Path,
        kdf_iterations: u32,
        users: &[&str],
    ) -> Result<Self, StackError> {
        sim.validate().map_err(StackError::Config)?;
        let sim = Arc::new(Mutex::new(SimCluster::new(sim)));
        let clock = SimClock(sim.clone());
        let store = Arc::new(JobStore::in_memory(Arc::new(clock.clone()))?);
        let key_store = Arc::new(CredentialStore::open(key_dir, kdf_iterations)?);
        let stack = Stack::new(
            Arc::new(SgeAdapter::new()),
            Arc::new(SimTransport::new(sim.clone())),
            key_store,
            store,
            gateway,
            poll,
            crate::connection::DEFAULT_TIMEOUT,
        )?;
        let this = Self {
            sim,
            clock,
            stack,
            keys: Mutex::new(BTreeMap::new()),
        };
        for user in users.iter().copied().chain([SIM_MONITOR_USER]) {
            this.add_user(user)?;
        }
        Ok(this)
    }

    /// Stores, unlocks and binds a simulated key for `user`. Idempotent.
    pub fn add_user(&self, user: &str) -> Result<KeyId, StackError> {
        let mut keys = self.keys.lock();
        if let Some(id) = keys.get(user) {
            return Ok(id.clone());
        }
        let material = format!("simulated private key for {user}");
        let conn = &self.stack.connections;
        let id = conn.store_key(material.as_bytes(), SIM_PASSPHRASE, user, SIM_HOST, 22)?;
        conn.unlock(&id, SIM_PASSPHRASE)?;
        let principal = if user == SIM_MONITOR_USER { SYSTEM_PRINCIPAL } else { user };
        self.stack.gateway.bind_credential(principal, id.clone());
        keys.insert(user.to_string(), id.clone());
        Ok(id)
    }

    pub fn key_for(&self, user: &str) -> Option<KeyId> {
        self.keys.lock().get(user).cloned()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.sim.lock().now()
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.stack.store
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.stack.gateway
    }

    pub fn poller(&self) -> &Arc<Poller> {
        &self.stack.poller
    }

    pub fn advance(&self, secs: u64) -> Vec<Transition> {
        self.sim.lock().advance_clock(secs)
    }

    /// A gateway request issued at the current sim time.
    pub async fn request(&self, principal: &str, action: JobAction) -> Result<Served, GatewayError> {
        let request = JobRequest::new(principal, action, self.now());
        self.stack.gateway.handle(request).await
    }

    pub async fn tick(&self) -> PollReport {
        self.stack.poller.tick(self.now()).await
    }

    /// Alternate clock advances and poll ticks until the cluster has no live
    /// jobs and the archive no open records. Returns the number of ticks, or
    /// `None` if `max_ticks` ran out first.
    pub async fn run_to_quiescence(&self, step_secs: u64, max_ticks: usize) -> Option<usize> {
        for n in 1..=max_ticks {
            self.advance(step_secs);
            self.tick().await;
            let quiet = self.sim.lock().is_quiescent();
            if quiet && self.stack.store.open_job_ids(None).is_ok_and(|ids| ids.is_empty()) {
                return Some(n);
            }
        }
        None
    }
}
