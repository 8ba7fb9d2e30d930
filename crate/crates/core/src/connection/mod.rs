//! Everything that talks to the cluster: the encrypted key store, the
//! transports and [`ConnectionManager`], which ties a stored credential to a
//! transport and enforces revocation and timeouts.
//!
//! Passphrases are never stored. [`ConnectionManager::unlock`] decrypts a key
//! once per login and keeps the plaintext in memory (zeroized on drop) until
//! [`ConnectionManager::lock`] or revocation.

pub mod keystore;
pub mod ssh;
pub mod transport;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use thiserror::Error;
use zeroize::Zeroizing;

pub use keystore::{CredentialInfo, CredentialStore, KeyError, KeyId, RevocationList};
pub use ssh::SshTransport;
pub use transport::{ExecTransport, SimTransport, Target, Transport, TransportError};

use crate::command::{CommandLine, ExecResult};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ConnectionError {
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("key {0} is locked; log in again to unlock it")]
    Locked(KeyId),
    #[error("key with fingerprint {0} has been revoked")]
    RevokedKey(String),
    #[error(transparent)]
    Key(KeyError),
    #[error("command timed out after {0:?}")]
    Timeout(Duration),
    #[error("{0}")]
    ConnectFailure(String),
    #[error("{0}")]
    AuthFailure(String),
    #[error("{0}")]
    TransportError(String),
    #[error("no such file: {0}")]
    FileNotFound(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

impl From<KeyError> for ConnectionError {
    fn from(e: KeyError) -> Self {
        match e {
            KeyError::UnknownKey(id) => ConnectionError::UnknownKey(id),
            KeyError::Revoked(fp) => ConnectionError::RevokedKey(fp),
            other => ConnectionError::Key(other),
        }
    }
}

impl From<TransportError> for ConnectionError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Connect { .. } => ConnectionError::ConnectFailure(e.to_string()),
            TransportError::Auth { .. } => ConnectionError::AuthFailure(e.to_string()),
            TransportError::Other(m) => ConnectionError::TransportError(m),
        }
    }
}

pub struct ConnectionManager {
    keys: Arc<CredentialStore>,
    transport: Arc<dyn Transport>,
    timeout: Duration,
    unlocked: RwLock<HashMap<KeyId, Arc<Zeroizing<Vec<u8>>>>>,
}

impl ConnectionManager {
    pub fn new(keys: Arc<CredentialStore>, transport: Arc<dyn Transport>, timeout: Duration) -> Self {
        Self {
            keys,
            transport,
            timeout,
            unlocked: RwLock::new(HashMap::new()),
        }
    }

    pub fn keys(&self) -> &Arc<CredentialStore> {
        &self.keys
    }

    pub fn transport_name(&self) -> &'static str {
        self.transport.name()
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn store_key(
        &self,
        plaintext: &[u8],
        passphrase: &str,
        user: &str,
        host: &str,
        port: u16,
    ) -> Result<KeyId, ConnectionError> {
        Ok(self.keys.store_key(plaintext, passphrase, user, host, port)?)
    }

    pub fn load_key(&self, key_id: &KeyId, passphrase: &str) -> Result<Zeroizing<Vec<u8>>, ConnectionError> {
        Ok(self.keys.load_key(key_id, passphrase)?)
    }

    /// Decrypt a key into the in-memory session.
    pub fn unlock(&self, key_id: &KeyId, passphrase: &str) -> Result<CredentialInfo, ConnectionError> {
        let key = self.keys.load_key(key_id, passphrase)?;
        let info = self
            .keys
            .credential(key_id)
            .ok_or_else(|| ConnectionError::UnknownKey(key_id.clone()))?;
        self.unlocked.write().insert(key_id.clone(), Arc::new(key));
        Ok(info)
    }

    pub fn lock(&self, key_id: &KeyId) {
        self.unlocked.write().remove(key_id);
    }

    pub fn is_unlocked(&self, key_id: &KeyId) -> bool {
        self.unlocked.read().contains_key(key_id)
    }

    /// Revoke a fingerprint and drop every unlocked key that carries it.
    pub fn revoke_key(&self, fingerprint: &str, now: DateTime<Utc>) -> Result<RevocationList, ConnectionError> {
        let list = self.keys.revoke_key(fingerprint, now)?;
        let revoked: Vec<KeyId> = self
            .keys
            .credentials()
            .into_iter()
            .filter(|c| c.fingerprint == fingerprint.trim())
            .map(|c| c.key_id)
            .collect();
        let mut unlocked = self.unlocked.write();
        for id in revoked {
            unlocked.remove(&id);
        }
        Ok(list)
    }

    pub fn credential_info(&self, key_id: &KeyId) -> Result<CredentialInfo, ConnectionError> {
        self.keys
            .credential(key_id)
            .ok_or_else(|| ConnectionError::UnknownKey(key_id.clone()))
    }

    /// Run a command with an unlocked credential. Revocation is checked first,
    /// so an execute that starts after a revoke always fails.
    pub async fn execute(&self, key_id: &KeyId, command: &CommandLine) -> Result<ExecResult, ConnectionError> {
        if command.is_empty() {
            return Err(ConnectionError::Invalid("empty command".into()));
        }
        let info = self.credential_info(key_id)?;
        if self.keys.is_revoked(&info.fingerprint) {
            return Err(ConnectionError::RevokedKey(info.fingerprint));
        }
        let key = self
            .unlocked
            .read()
            .get(key_id)
            .cloned()
            .ok_or_else(|| ConnectionError::Locked(key_id.clone()))?;
        let target = Target {
            user: info.user,
            host: info.host,
            port: info.port,
        };
        tracing::debug!(%key_id, command = %command, transport = self.transport.name(), "execute");
        match tokio::time::timeout(self.timeout, self.transport.execute(&target, &key, command)).await {
            Ok(result) => Ok(result?),
            Err(_) => Err(ConnectionError::Timeout(self.timeout)),
        }
    }

    /// The last `lines` lines of a remote file, in order.
    pub async fn tail_file(&self, key_id: &KeyId, path: &str, lines: usize) -> Result<Vec<String>, ConnectionError> {
        if lines == 0 {
            return Err(ConnectionError::Invalid("line count must be at least 1".into()));
        }
        let cmd = CommandLine::new(["tail".to_string(), "-n".into(), lines.to_string(), "--".into(), path.into()]);
        let out = self.read_command(key_id, path, &cmd).await?;
        Ok(out.lines().map(str::to_string).collect())
    }

    /// A whole remote file.
    pub async fn read_file(&self, key_id: &KeyId, path: &str) -> Result<String, ConnectionError> {
        let cmd = CommandLine::new(["cat", "--", path]);
        self.read_command(key_id, path, &cmd).await
    }

    async fn read_command(&self, key_id: &KeyId, path: &str, cmd: &CommandLine) -> Result<String, ConnectionError> {
        let result = self.execute(key_id, cmd).await?;
        if result.is_success() {
            return Ok(result.stdout);
        }
        Err(classify_read_failure(path, &result))
    }
}

pub(crate) fn classify_read_failure(path: &str, result: &ExecResult) -> ConnectionError {
    if result.stderr.contains("No such file") {
        ConnectionError::FileNotFound(path.to_string())
    } else if result.stderr.contains("Permission denied") {
        ConnectionError::PermissionDenied(path.to_string())
    } else {
        ConnectionError::TransportError(format!(
            "reading {path} failed with exit {}: {}",
            result.exit_code,
            result.stderr.trim()
        ))
    }
}
