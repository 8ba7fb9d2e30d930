//! Login and sessions.
//!
//! Identity comes from an [`IdentityProvider`]. Two ship with the server: a
//! local provider that checks per-user tokens against stored SHA-256
//! digests, and an assertion provider that accepts identities signed with a
//! shared HMAC secret, which lets an external single-sign-on bridge vouch
//! for users.

use std::collections::{BTreeMap, HashMap};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, TimeDelta, Utc};
use hmac::{Hmac, KeyInit, Mac};
use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Random bytes per session token.
pub const TOKEN_BYTES: usize = 32;
/// Tolerated clock difference for assertion issue times.
pub const ASSERTION_SKEW_SECONDS: i64 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("login method `{0}` is not configured")]
    ProviderUnavailable(String),
    #[error("missing session token")]
    MissingSession,
    #[error("session has expired")]
    ExpiredSession,
    #[error("unknown session token")]
    UnknownSession,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Session {
    pub token: String,
    pub principal: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub admin: bool,
}

/// What a client presents at login.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "method", rename_all = "camelCase")]
pub enum Credentials {
    Local { user: String, token: String },
    Assertion { assertion: String },
}

impl Credentials {
    pub fn method(&self) -> &'static str {
        match self {
            Credentials::Local { .. } => "local",
            Credentials::Assertion { .. } => "assertion",
        }
    }
}

pub trait IdentityProvider: Send + Sync {
    /// The `method` value this provider answers to.
    fn method(&self) -> &'static str;

    /// The principal the credentials prove, if they do.
    fn authenticate(&self, credentials: &Credentials, now: DateTime<Utc>) -> Result<String, AuthError>;
}

pub fn token_digest(token: &str) -> [u8; 32] {
    Sha256::digest(token.as_bytes()).into()
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub struct LocalTokenProvider {
    digests: BTreeMap<String, [u8; 32]>,
}

impl LocalTokenProvider {
    /// `digests` maps user names to hex SHA-256 digests of their tokens.
    pub fn from_hex(digests: &BTreeMap<String, String>) -> Result<Self, String> {
        let mut out = BTreeMap::new();
        for (user, hex_digest) in digests {
            let bytes = hex::decode(hex_digest).map_err(|e| format!("{user}: {e}"))?;
            let digest: [u8; 32] = bytes
                .try_into()
                .map_err(|_| format!("{user}: digest must be 32 bytes"))?;
            out.insert(user.clone(), digest);
        }
        Ok(Self { digests: out })
    }
}

impl IdentityProvider for LocalTokenProvider {
    fn method(&self) -> &'static str {
        "local"
    }

    fn authenticate(&self, credentials: &Credentials, _now: DateTime<Utc>) -> Result<String, AuthError> {
        let Credentials::Local { user, token } = credentials else {
            return Err(AuthError::ProviderUnavailable(credentials.method().into()));
        };
        let presented = token_digest(token);
        match self.digests.get(user) {
            Some(stored) if constant_time_eq(stored, &presented) => Ok(user.clone()),
            _ => Err(AuthError::AuthFailure("unknown user or wrong token".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionClaims {
    pub sub: String,
    /// Unix seconds.
    pub iat: i64,
    pub exp: i64,
}

/// `base64url(claims JSON) "." hex(HMAC-SHA256(secret, first part))`.
pub fn sign_assertion(secret: &[u8], claims: &AssertionClaims) -> String {
    let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialize"));
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("hmac takes any key length");
    mac.update(payload.as_bytes());
    format!("{payload}.{}", hex::encode(mac.finalize().into_bytes()))
}

pub struct AssertionProvider {
    secret: Vec<u8>,
    max_age: TimeDelta,
}

impl AssertionProvider {
    pub fn new(secret: impl Into<Vec<u8>>, max_age: TimeDelta) -> Self {
        Self {
            secret: secret.into(),
            max_age,
        }
    }

    pub fn verify(&self, assertion: &str, now: DateTime<Utc>) -> Result<AssertionClaims, AuthError> {
        let fail = |m: &str| AuthError::AuthFailure(m.to_string());
        let (payload, signature) = assertion.split_once('.').ok_or_else(|| fail("malformed assertion"))?;
        let signature = hex::decode(signature).map_err(|_| fail("malformed assertion signature"))?;
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.secret).expect("hmac takes any key length");
        mac.update(payload.as_bytes());
        mac.verify_slice(&signature).map_err(|_| fail("bad assertion signature"))?;
        let json = URL_SAFE_NO_PAD.decode(payload).map_err(|_| fail("malformed assertion payload"))?;
        let claims: AssertionClaims = serde_json::from_slice(&json).map_err(|_| fail("malformed assertion claims"))?;
        let now_s = now.timestamp();
        if claims.sub.is_empty() {
            return Err(fail("assertion names no subject"));
        }
        if claims.iat > now_s + ASSERTION_SKEW_SECONDS {
            return Err(fail("assertion issued in the future"));
        }
        if claims.exp <= now_s {
            return Err(fail("assertion has expired"));
        }
        if claims.exp - claims.iat > self.max_age.num_seconds() {
            return Err(fail("assertion lifetime too long"));
        }
        Ok(claims)
    }
}

impl IdentityProvider for AssertionProvider {
    fn method(&self) -> &'static str {
        "assertion"
    }

    fn authenticate(&self, credentials: &Credentials, now: DateTime<Utc>) -> Result<String, AuthError> {
        let Credentials::Assertion { assertion } = credentials else {
            return Err(AuthError::ProviderUnavailable(credentials.method().into()));
        };
        self.verify(assertion, now).map(|c| c.sub)
    }
}

/// Session issuance and validation. Expired sessions are dropped when seen.
pub struct SessionStore {
    ttl: TimeDelta,
    sessions: RwLock<HashMap<String, Session>>,
}

impl SessionStore {
    pub fn new(ttl: TimeDelta) -> Self {
        Self {
            ttl,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn issue(&self, principal: &str, admin: bool, now: DateTime<Utc>) -> Session {
        let mut bytes = [0u8; TOKEN_BYTES];
        rand::rng().fill_bytes(&mut bytes);
        let session = Session {
            token: hex::encode(bytes),
            principal: principal.to_string(),
            issued_at: now,
            expires_at: now + self.ttl,
            admin,
        };
        self.sessions.write().insert(session.token.clone(), session.clone());
        session
    }

    pub fn validate(&self, token: &str, now: DateTime<Utc>) -> Result<Session, AuthError> {
        let found = self.sessions.read().get(token).cloned();
        match found {
            None => Err(AuthError::UnknownSession),
            Some(s) if s.expires_at <= now => {
                self.sessions.write().remove(token);
                Err(AuthError::ExpiredSession)
            }
            Some(s) => Ok(s),
        }
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.sessions.write().remove(token).is_some()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Routes credentials to the provider for their method.
#[derive(Default)]
pub struct Authenticator {
    providers: Vec<Box<dyn IdentityProvider>>,
}

impl Authenticator {
    pub fn with(mut self, provider: impl IdentityProvider + 'static) -> Self {
        self.providers.push(Box::new(provider));
        self
    }

    pub fn methods(&self) -> Vec<&'static str> {
        self.providers.iter().map(|p| p.method()).collect()
    }

    pub fn authenticate(&self, credentials: &Credentials, now: DateTime<Utc>) -> Result<String, AuthError> {
        let method = credentials.method();
        self.providers
            .iter()
            .find(|p| p.method() == method)
            .ok_or_else(|| AuthError::ProviderUnavailable(method.into()))?
            .authenticate(credentials, now)
    }
}
