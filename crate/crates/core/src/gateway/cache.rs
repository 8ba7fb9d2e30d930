//! Last-response cache, keyed per principal.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::RwLock;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{GatewayResponse, JobAction, RequestKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CacheKey {
    pub principal: String,
    pub kind: RequestKind,
    /// SHA-256 of the action's canonical JSON.
    pub digest: String,
}

impl CacheKey {
    pub fn for_action(principal: &str, action: &JobAction) -> Self {
        let canonical = serde_json::to_vec(action).expect("actions serialize");
        Self {
            principal: principal.to_string(),
            kind: action.kind(),
            digest: hex::encode(Sha256::digest(canonical)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub value: Arc<GatewayResponse>,
    pub stored_at: DateTime<Utc>,
    pub ttl: TimeDelta,
}

impl CacheEntry {
    pub fn is_fresh(&self, now: DateTime<Utc>) -> bool {
        now >= self.stored_at && now - self.stored_at <= self.ttl
    }
}

pub struct ResponseCache {
    ttl: TimeDelta,
    entries: RwLock<HashMap<CacheKey, CacheEntry>>,
}

impl ResponseCache {
    pub fn new(ttl: TimeDelta) -> Self {
        Self {
            ttl,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn ttl(&self) -> TimeDelta {
        self.ttl
    }

    /// A hit only when an entry exists and is no older than the ttl.
    pub fn lookup(&self, key: &CacheKey, now: DateTime<Utc>) -> Option<CacheEntry> {
        self.entries
            .read()
            .get(key)
            .filter(|e| e.is_fresh(now))
            .cloned()
    }

    pub fn insert(&self, key: CacheKey, value: Arc<GatewayResponse>, now: DateTime<Utc>) {
        let entry = CacheEntry {
            key: key.clone(),
            value,
            stored_at: now,
            ttl: self.ttl,
        };
        self.entries.write().insert(key, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
