//! Encrypted SSH key store and fingerprint revocation list.
//!
//! Each private key is sealed with XChaCha20-Poly1305 under a 256-bit key
//! derived from the user's passphrase by PBKDF2-HMAC-SHA256 with a fresh
//! 16-byte salt. The credential's identity (id, user, host, port,
//! fingerprint) is bound as associated data, so editing any of those fields
//! on disk makes decryption fail. A wrong passphrase is always reported as
//! [`KeyError::Decrypt`], never as garbage bytes.
//!
//! Files, both written atomically through a temp file and rename:
//!
//! * `credentials.json`: `{"version": 1, "credentials": [...]}`,
//! * `revoked_fingerprints.txt`: `# updated_at <RFC 3339>` then one
//!   fingerprint per line.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD};
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{Key, XChaCha20Poly1305, XNonce};
use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

pub const FILE_VERSION: u32 = 1;
pub const CIPHER_ID: &str = "xchacha20poly1305";
pub const MIN_ITERATIONS: u32 = 100_000;
pub const DEFAULT_MIN_PASSPHRASE: usize = 8;
pub const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 24;
const CREDENTIALS_FILE: &str = "credentials.json";
const REVOCATION_FILE: &str = "revoked_fingerprints.txt";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub String);

impl KeyId {
    fn generate() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for KeyId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("passphrase must be at least {min} characters")]
    WeakPassphrase { min: usize },
    #[error("key material is empty")]
    EmptyKey,
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("wrong passphrase or tampered credential")]
    Decrypt,
    #[error("key with fingerprint {0} has been revoked")]
    Revoked(String),
    #[error("iteration count {0} is below the minimum of {MIN_ITERATIONS}")]
    WeakIterations(u32),
    #[error("credential store is corrupt: {0}")]
    Corrupt(String),
    #[error("credential storage failed: {0}")]
    Storage(#[from] std::io::Error),
}

mod b64 {
    use super::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

/// A stored, encrypted credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub key_id: KeyId,
    pub user: String,
    pub host: String,
    pub port: u16,
    #[serde(with = "b64")]
    pub salt: Vec<u8>,
    pub iterations: u32,
    pub cipher: String,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    pub fingerprint: String,
}

impl Credential {
    fn aad(&self) -> Vec<u8> {
        format!(
            "{}\0{}\0{}\0{}\0{}",
            self.key_id, self.user, self.host, self.port, self.fingerprint
        )
        .into_bytes()
    }

    pub fn info(&self) -> CredentialInfo {
        CredentialInfo {
            key_id: self.key_id.clone(),
            user: self.user.clone(),
            host: self.host.clone(),
            port: self.port,
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// The non-secret part of a credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CredentialInfo {
    pub key_id: KeyId,
    pub user: String,
    pub host: String,
    pub port: u16,
    pub fingerprint: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CredentialFile {
    version: u32,
    credentials: Vec<Credential>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RevocationList {
    pub revoked_fingerprints: BTreeSet<String>,
    pub updated_at: Option<DateTime<Utc>>,
}

/// OpenSSH-style `SHA256:` fingerprint of the public half when `key` parses
/// as an OpenSSH private key, otherwise a `SHA256:` digest of the raw bytes.
pub fn fingerprint(key: &[u8]) -> String {
    if let Ok(text) = std::str::from_utf8(key) {
        if let Ok(parsed) = russh::keys::decode_secret_key(text, None) {
            return parsed
                .public_key()
                .fingerprint(russh::keys::HashAlg::Sha256)
                .to_string();
        }
    }
    format!("SHA256:{}", STANDARD_NO_PAD.encode(Sha256::digest(key)))
}

fn derive(passphrase: &str, salt: &[u8], iterations: u32) -> Zeroizing<[u8; 32]> {
    let mut out = Zeroizing::new([0u8; 32]);
    pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt, iterations, out.as_mut());
    out
}

fn cipher_for(derived: &[u8; 32]) -> XChaCha20Poly1305 {
    XChaCha20Poly1305::new(&Key::from(*derived))
}

struct State {
    credentials: Vec<Credential>,
    revoked: RevocationList,
}

pub struct CredentialStore {
    dir: PathBuf,
    iterations: u32,
    min_passphrase: usize,
    state: RwLock<State>,
}

impl CredentialStore {
    /// Open (creating if needed) the store in `dir`.
    pub fn open(dir: impl Into<PathBuf>, iterations: u32) -> Result<Self, KeyError> {
        if iterations < MIN_ITERATIONS {
            return Err(KeyError::WeakIterations(iterations));
        }
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let credentials = match fs::read(dir.join(CREDENTIALS_FILE)) {
            Ok(bytes) => {
                let file: CredentialFile =
                    serde_json::from_slice(&bytes).map_err(|e| KeyError::Corrupt(e.to_string()))?;
                if file.version != FILE_VERSION {
                    return Err(KeyError::Corrupt(format!("unsupported version {}", file.version)));
                }
                file.credentials
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let revoked = match fs::read_to_string(dir.join(REVOCATION_FILE)) {
            Ok(text) => parse_revocations(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RevocationList {
                revoked_fingerprints: BTreeSet::new(),
                updated_at: None,
            },
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            dir,
            iterations,
            min_passphrase: DEFAULT_MIN_PASSPHRASE,
            state: RwLock::new(State { credentials, revoked }),
        })
    }

    pub fn with_min_passphrase(mut self, min: usize) -> Self {
        self.min_passphrase = min.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn credentials_path(&self) -> PathBuf {
        self.dir.join(CREDENTIALS_FILE)
    }

    pub fn revocation_path(&self) -> PathBuf {
        self.dir.join(REVOCATION_FILE)
    }

    pub fn store_key(
        &self,
        plaintext: &[u8],
        passphrase: &str,
        user: &str,
        host: &str,
        port: u16,
    ) -> Result<KeyId, KeyError> {
        if plaintext.is_empty() {
            return Err(KeyError::EmptyKey);
        }
        if passphrase.chars().count() < self.min_passphrase {
            return Err(KeyError::WeakPassphrase { min: self.min_passphrase });
        }
        let mut rng = rand::rng();
        let mut salt = vec![0u8; SALT_LEN];
        rng.fill_bytes(&mut salt);
        let mut nonce = vec![0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);

        let mut cred = Credential {
            key_id: KeyId::generate(),
            user: user.to_string(),
            host: host.to_string(),
            port,
            salt,
            iterations: self.iterations,
            cipher: CIPHER_ID.to_string(),
            nonce,
            ciphertext: Vec::new(),
            fingerprint: fingerprint(plaintext),
        };
        let derived = derive(passphrase, &cred.salt, cred.iterations);
        let nonce = XNonce::try_from(cred.nonce.as_slice()).expect("nonce length");
        let aad = cred.aad();
        cred.ciphertext = cipher_for(&derived)
            .encrypt(&nonce, Payload { msg: plaintext, aad: &aad })
            .map_err(|_| KeyError::Corrupt("encryption failed".into()))?;

        let mut state = self.state.write();
        let mut next = state.credentials.clone();
        next.push(cred.clone());
        self.write_credentials(&next)?;
        state.credentials = next;
        tracing::info!(key_id = %cred.key_id, fingerprint = %cred.fingerprint, "stored key");
        Ok(cred.key_id)
    }

    pub fn load_key(&self, key_id: &KeyId, passphrase: &str) -> Result<Zeroizing<Vec<u8>>, KeyError> {
        let state = self.state.read();
        let cred = state
            .credentials
            .iter()
            .find(|c| &c.key_id == key_id)
            .ok_or_else(|| KeyError::UnknownKey(key_id.clone()))?;
        if state.revoked.revoked_fingerprints.contains(&cred.fingerprint) {
            return Err(KeyError::Revoked(cred.fingerprint.clone()));
        }
        if cred.cipher != CIPHER_ID || cred.iterations < MIN_ITERATIONS {
            return Err(KeyError::Corrupt(format!("unsupported cipher parameters for {key_id}")));
        }
        let nonce = XNonce::try_from(cred.nonce.as_slice())
            .map_err(|_| KeyError::Corrupt(format!("bad nonce for {key_id}")))?;
        let derived = derive(passphrase, &cred.salt, cred.iterations);
        let aad = cred.aad();
        cipher_for(&derived)
            .decrypt(&nonce, Payload { msg: &cred.ciphertext, aad: &aad })
            .map(Zeroizing::new)
            .map_err(|_| KeyError::Decrypt)
    }

    pub fn credential(&self, key_id: &KeyId) -> Option<CredentialInfo> {
        self.state
            .read()
            .credentials
            .iter()
            .find(|c| &c.key_id == key_id)
            .map(Credential::info)
    }

    pub fn credentials(&self) -> Vec<CredentialInfo> {
        self.state.read().credentials.iter().map(Credential::info).collect()
    }

    pub fn is_revoked(&self, fingerprint: &str) -> bool {
        self.state.read().revoked.revoked_fingerprints.contains(fingerprint)
    }

    pub fn revocations(&self) -> RevocationList {
        self.state.read().revoked.clone()
    }

    /// Add `fingerprint` to the revocation list. Revoking a fingerprint twice,
    /// or one that matches no stored key, is allowed.
    pub fn revoke_key(&self, fingerprint: &str, now: DateTime<Utc>) -> Result<RevocationList, KeyError> {
        let fingerprint = fingerprint.trim();
        if fingerprint.is_empty() || fingerprint.contains(['\n', '\r']) {
            return Err(KeyError::Corrupt("fingerprint must be a single nonempty line".into()));
        }
        let mut state = self.state.write();
        if state.revoked.revoked_fingerprints.contains(fingerprint) {
            return Ok(state.revoked.clone());
        }
        let mut next = state.revoked.clone();
        next.revoked_fingerprints.insert(fingerprint.to_string());
        next.updated_at = Some(now);
        let mut text = format!("# updated_at {}\n", now.to_rfc3339());
        for fp in &next.revoked_fingerprints {
            text.push_str(fp);
            text.push('\n');
        }
        write_atomic(&self.revocation_path(), text.as_bytes())?;
        state.revoked = next;
        tracing::warn!(%fingerprint, "revoked key fingerprint");
        Ok(state.revoked.clone())
    }

    fn write_credentials(&self, credentials: &[Credential]) -> Result<(), KeyError> {
        let file = CredentialFile {
            version: FILE_VERSION,
            credentials: credentials.to_vec(),
        };
        let bytes = serde_json::to_vec_pretty(&file).map_err(|e| KeyError::Corrupt(e.to_string()))?;
        write_atomic(&self.credentials_path(), &bytes)
    }
}

fn parse_revocations(text: &str) -> Result<RevocationList, KeyError> {
    let mut list = RevocationList {
        revoked_fingerprints: BTreeSet::new(),
        updated_at: None,
    };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(stamp) = comment.trim().strip_prefix("updated_at") {
                let at = DateTime::parse_from_rfc3339(stamp.trim())
                    .map_err(|e| KeyError::Corrupt(format!("revocation timestamp: {e}")))?;
                list.updated_at = Some(at.with_timezone(&Utc));
            }
            continue;
        }
        list.revoked_fingerprints.insert(line.to_string());
    }
    Ok(list)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), KeyError> {
    let tmp = path.with_extension("tmp");
    {
        let mut options = fs::OpenOptions::new();
        options.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            options.mode(0o600);
        }
        let mut f = options.open(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
