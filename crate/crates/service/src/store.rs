//! Session registry: in-memory handles with one JSON file per session on
//! disk, so a restarted server picks sessions back up.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;

use crate::session::{ServiceError, ServiceResult, Session};

pub const DEFAULT_TTL_SECS: u64 = 24 * 60 * 60;

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub struct SessionStore {
    dir: Option<PathBuf>,
    ttl_secs: u64,
    live: Mutex<HashMap<String, SessionHandle>>,
}

impl SessionStore {
    /// Memory only; nothing survives the process.
    pub fn in_memory(ttl_secs: u64) -> Self {
        Self {
            dir: None,
            ttl_secs,
            live: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: &Path, ttl_secs: u64) -> ServiceResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            ttl_secs,
            live: Mutex::new(HashMap::new()),
        })
    }

    fn path(&self, id: &str) -> Option<PathBuf> {
        // ids are uuids; anything else never touches the filesystem
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        match (&self.dir, safe) {
            (Some(d), true) => Some(d.join(format!("{id}.json"))),
            _ => None,
        }
    }

    pub fn persist(&self, session: &Session) -> ServiceResult<()> {
        let Some(path) = self.path(&session.id) else {
            return Ok(());
        };
        let json =
            serde_json::to_vec(session).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    pub fn insert(&self, session: Session) -> ServiceResult<SessionHandle> {
        self.persist(&session)?;
        let id = session.id.clone();
        let handle = Arc::new(tokio::sync::Mutex::new(session));
        self.live.lock().insert(id, handle.clone());
        Ok(handle)
    }

    /// Live handle, falling back to the on-disk copy.
    pub fn get(&self, id: &str) -> ServiceResult<SessionHandle> {
        if let Some(h) = self.live.lock().get(id) {
            return Ok(h.clone());
        }
        let path = self
            .path(id)
            .filter(|p| p.exists())
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))?;
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let session: Session =
            serde_json::from_slice(&bytes).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let mut live = self.live.lock();
        Ok(live
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(tokio::sync::Mutex::new(session)))
            .clone())
    }

    pub fn len(&self) -> usize {
        self.live.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the ttl, in memory and on disk.
    /// Sessions busy with a request are left alone. Returns the evicted ids.
    pub fn evict_idle(&self, now: u64) -> Vec<String> {
        let mut evicted = Vec::new();
        let mut live = self.live.lock();
        live.retain(|id, handle| {
            let keep = match handle.try_lock() {
                Ok(s) => s.last_active.saturating_add(self.ttl_secs) > now,
                Err(_) => true,
            };
            if !keep {
                evicted.push(id.clone());
            }
            keep
        });
        drop(live);
        for id in &evicted {
            if let Some(p) = self.path(id) {
                let _ = std::fs::remove_file(p);
            }
        }
        if let Some(dir) = &self.dir {
            evicted.extend(self.evict_dormant(dir, now));
        }
        evicted
    }

    /// Files left by an earlier process that were never loaded again.
    fn evict_dormant(&self, dir: &Path, now: u64) -> Vec<String> {
        let Ok(entries) = std::fs::read_dir(dir) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(id) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".json"))
            else {
                continue;
            };
            if self.live.lock().contains_key(id) {
                continue;
            }
            let idle = std::fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice::<Session>(&b).ok())
                .is_some_and(|s| s.last_active.saturating_add(self.ttl_secs) <= now);
            if idle && std::fs::remove_file(&path).is_ok() {
                out.push(id.to_string());
            }
        }
        out
    }
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Internal(format!("{}: {e}", path.display()))
}
