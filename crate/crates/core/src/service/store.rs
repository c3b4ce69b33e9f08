//! File-backed sessions: one JSON document per session, replaced atomically
//! on every write. Writers to the same session are serialized by a
//! per-session lock.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::orchestrator::{AuditEntry, Scenario};
use crate::patient::PatientRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDoc {
    pub id: String,
    pub revision: u64,
    pub scenario: Scenario,
    pub record: PatientRecord,
    pub clock: u64,
    pub next_message: u64,
    pub audit: Vec<AuditEntry>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("session store: {0}")]
    Io(#[from] std::io::Error),
    #[error("session document: {0}")]
    Corrupt(#[from] serde_json::Error),
}

#[derive(Debug)]
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl SessionStore {
    /// Opens a store rooted at `dir`, creating the directory if needed.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(SessionStore { dir, locks: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Only ids this store could have issued map to a file.
    fn path(&self, id: &str) -> Result<PathBuf, StoreError> {
        let parsed = Uuid::parse_str(id).map_err(|_| StoreError::NotFound(id.to_owned()))?;
        if parsed.hyphenated().to_string() != id {
            return Err(StoreError::NotFound(id.to_owned()));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_owned()).or_default().clone()
    }

    fn write(&self, doc: &SessionDoc) -> Result<(), StoreError> {
        let target = self.path(&doc.id)?;
        let tmp = self.dir.join(format!(".{}.{}.tmp", doc.id, Uuid::new_v4()));
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(serde_json::to_string_pretty(doc)?.as_bytes())?;
        file.sync_all()?;
        drop(file);
        std::fs::rename(&tmp, &target).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    /// Persists a new session at revision 0 under a fresh id.
    pub fn create(&self, scenario: Scenario, record: PatientRecord) -> Result<SessionDoc, StoreError> {
        let doc = SessionDoc {
            id: Uuid::new_v4().hyphenated().to_string(),
            revision: 0,
            scenario,
            record,
            clock: 0,
            next_message: 1,
            audit: Vec::new(),
        };
        self.write(&doc)?;
        Ok(doc)
    }

    pub fn load(&self, id: &str) -> Result<SessionDoc, StoreError> {
        let path = self.path(id)?;
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(id.to_owned())),
            Err(e) => return Err(e.into()),
        };
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies `change` under the session lock. The document is written back
    /// with its revision bumped only when `change` succeeds.
    pub fn update<R, E>(&self, id: &str, change: impl FnOnce(&mut SessionDoc) -> Result<R, E>) -> Result<R, E>
    where
        E: From<StoreError>,
    {
        let lock = self.lock(id);
        let _guard = lock.lock().expect("session lock poisoned");
        let mut doc = self.load(id)?;
        let out = change(&mut doc)?;
        doc.revision += 1;
        self.write(&doc)?;
        Ok(out)
    }
}
