//! SSH transport over russh. Public-key auth only; the server's host key must
//! appear in a static known-hosts file.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use russh::client;
use russh::keys::{check_known_hosts_path, decode_secret_key, PrivateKeyWithHashAlg, PublicKeyOrCertificate};
use russh::{ChannelMsg, Disconnect};

use super::transport::{Target, Transport, TransportError};
use crate::command::{CommandLine, ExecResult};

pub struct SshTransport {
    known_hosts: PathBuf,
    connect_timeout: Duration,
}

impl SshTransport {
    pub fn new(known_hosts: impl Into<PathBuf>) -> Self {
        Self {
            known_hosts: known_hosts.into(),
            connect_timeout: Duration::from_secs(15),
        }
    }

    pub fn with_connect_timeout(mut self, timeout: Duration) -> Self {
        self.connect_timeout = timeout;
        self
    }
}

struct HostKeyCheck {
    host: String,
    port: u16,
    known_hosts: PathBuf,
}

impl client::Handler for HostKeyCheck {
    type Error = russh::Error;

    async fn check_server_key(&mut self, server_key: &PublicKeyOrCertificate) -> Result<bool, Self::Error> {
        let PublicKeyOrCertificate::PublicKey { key, .. } = server_key else {
            tracing::warn!(host = %self.host, "host certificates are not supported");
            return Ok(false);
        };
        match check_known_hosts_path(&self.host, self.port, key, &self.known_hosts) {
            Ok(known) => {
                if !known {
                    tracing::warn!(host = %self.host, "host key not in known_hosts");
                }
                Ok(known)
            }
            Err(e) => {
                tracing::warn!(host = %self.host, error = %e, "host key rejected");
                Ok(false)
            }
        }
    }
}

#[async_trait]
impl Transport for SshTransport {
    fn name(&self) -> &'static str {
        "ssh"
    }

    async fn execute(
        &self,
        target: &Target,
        key: &[u8],
        command: &CommandLine,
    ) -> Result<ExecResult, TransportError> {
        let started = Instant::now();
        let auth_err = |reason: String| TransportError::Auth {
            user: target.user.clone(),
            host: target.host.clone(),
            reason,
        };
        let connect_err = |reason: String| TransportError::Connect {
            host: target.host.clone(),
            port: target.port,
            reason,
        };

        // Never echo the key or the parser's message, which may quote it.
        let text = std::str::from_utf8(key).map_err(|_| auth_err("key is not an OpenSSH private key".into()))?;
        let private = decode_secret_key(text, None).map_err(|_| auth_err("key could not be decoded".into()))?;

        let config = Arc::new(client::Config {
            inactivity_timeout: Some(Duration::from_secs(300)),
            ..Default::default()
        });
        let handler = HostKeyCheck {
            host: target.host.clone(),
            port: target.port,
            known_hosts: self.known_hosts.clone(),
        };
        let mut session = tokio::time::timeout(
            self.connect_timeout,
            client::connect(config, (target.host.as_str(), target.port), handler),
        )
        .await
        .map_err(|_| connect_err("connection timed out".into()))?
        .map_err(|e| connect_err(e.to_string()))?;

        let hash = session
            .best_supported_rsa_hash()
            .await
            .map_err(|e| connect_err(e.to_string()))?
            .flatten();
        let auth = session
            .authenticate_publickey(&target.user, PrivateKeyWithHashAlg::new(Arc::new(private), hash))
            .await
            .map_err(|e| auth_err(e.to_string()))?;
        if !auth.success() {
            return Err(auth_err("public key rejected".into()));
        }

        let mut channel = session
            .channel_open_session()
            .await
            .map_err(|e| TransportError::Other(e.to_string()))?;
        channel
            .exec(true, command.to_shell_string())
            .await
            .map_err(|e| TransportError::Other(e.to_string()))?;

        let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
        let mut exit_code = None;
        while let Some(msg) = channel.wait().await {
            match msg {
                ChannelMsg::Data { data } => stdout.extend_from_slice(&data),
                ChannelMsg::ExtendedData { data, ext: 1 } => stderr.extend_from_slice(&data),
                ChannelMsg::ExitStatus { exit_status } => exit_code = Some(exit_status as i32),
                ChannelMsg::ExitSignal { .. } => exit_code = exit_code.or(Some(255)),
                _ => {}
            }
        }
        let _ = session.disconnect(Disconnect::ByApplication, "", "en").await;
        let exit_code = exit_code.ok_or_else(|| TransportError::Other("remote command ended without an exit status".into()))?;
        Ok(ExecResult {
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
            exit_code,
            elapsed: started.elapsed(),
        })
    }
}
