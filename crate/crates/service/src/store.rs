//! Session records and content-addressed audio blobs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use redb::{Database, ReadableDatabase, ReadableTable, TableDefinition};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::session::Session;

const SESSIONS: TableDefinition<&str, &[u8]> = TableDefinition::new("sessions");

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait Store: Send + Sync {
    /// Stores `bytes` verbatim and returns their hash. Storing the same bytes twice is a no-op.
    fn put_blob(&self, bytes: &[u8]) -> Result<String>;
    fn get_blob(&self, hash: &str) -> Result<Option<Vec<u8>>>;
    /// Path written into exported manifests for a blob.
    fn blob_location(&self, hash: &str) -> String;
    fn put_session(&self, session: &Session) -> Result<()>;
    fn get_session(&self, id: &str) -> Result<Option<Session>>;
    /// All sessions, ordered by id.
    fn sessions(&self) -> Result<Vec<Session>>;
}

/// Sessions in an embedded transactional store, blobs as files under `<dir>/blobs`.
pub struct RedbStore {
    db: Database,
    blob_dir: PathBuf,
}

impl RedbStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let blob_dir = dir.join("blobs");
        std::fs::create_dir_all(&blob_dir)?;
        let db = Database::create(dir.join("sessions.redb")).map_err(redb::Error::from)?;
        let tx = db.begin_write().map_err(redb::Error::from)?;
        tx.open_table(SESSIONS).map_err(redb::Error::from)?;
        tx.commit().map_err(redb::Error::from)?;
        Ok(Self {
            db,
            blob_dir: std::path::absolute(blob_dir)?,
        })
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.blob_dir.join(&hash[..2.min(hash.len())]).join(format!("{hash}.wav"))
    }
}

impl Store for RedbStore {
    fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let hash = content_hash(bytes);
        let path = self.blob_path(&hash);
        if !path.exists() {
            let dir = path.parent().expect("blob has a parent");
            std::fs::create_dir_all(dir)?;
            let tmp = dir.join(format!(".{hash}.{}", uuid::Uuid::new_v4()));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(hash)
    }

    fn get_blob(&self, hash: &str) -> Result<Option<Vec<u8>>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Ok(None);
        }
        match std::fs::read(self.blob_path(hash)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn blob_location(&self, hash: &str) -> String {
        self.blob_path(hash).to_string_lossy().into_owned()
    }

    fn put_session(&self, session: &Session) -> Result<()> {
        let bytes = serde_json::to_vec(session)?;
        let tx = self.db.begin_write().map_err(redb::Error::from)?;
        {
            let mut t = tx.open_table(SESSIONS).map_err(redb::Error::from)?;
            t.insert(session.session_id.as_str(), bytes.as_slice())
                .map_err(redb::Error::from)?;
        }
        tx.commit().map_err(redb::Error::from)?;
        Ok(())
    }

    fn get_session(&self, id: &str) -> Result<Option<Session>> {
        let tx = self.db.begin_read().map_err(redb::Error::from)?;
        let t = tx.open_table(SESSIONS).map_err(redb::Error::from)?;
        let Some(v) = t.get(id).map_err(redb::Error::from)? else {
            return Ok(None);
        };
        Ok(Some(serde_json::from_slice(v.value())?))
    }

    fn sessions(&self) -> Result<Vec<Session>> {
        let tx = self.db.begin_read().map_err(redb::Error::from)?;
        let t = tx.open_table(SESSIONS).map_err(redb::Error::from)?;
        let mut out = Vec::new();
        for row in t.iter().map_err(redb::Error::from)? {
            let (_, v) = row.map_err(redb::Error::from)?;
            out.push(serde_json::from_slice(v.value())?);
        }
        Ok(out)
    }
}

/// Volatile store for tests and throwaway runs.
#[derive(Default)]
pub struct MemoryStore {
    blobs: Mutex<HashMap<String, Vec<u8>>>,
    sessions: Mutex<HashMap<String, Session>>,
}

impl Store for MemoryStore {
    fn put_blob(&self, bytes: &[u8]) -> Result<String> {
        let hash = content_hash(bytes);
        self.blobs
            .lock()
            .expect("blob map poisoned")
            .entry(hash.clone())
            .or_insert_with(|| bytes.to_vec());
        Ok(hash)
    }

    fn get_blob(&self, hash: &str) -> Result<Option<Vec<u8>>> {
        Ok(self.blobs.lock().expect("blob map poisoned").get(hash).cloned())
    }

    fn blob_location(&self, hash: &str) -> String {
        format!("blobs/{hash}.wav")
    }

    fn put_session(&self, session: &Session) -> Result<()> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(session.session_id.clone(), session.clone());
        Ok(())
    }

    fn get_session(&self, id: &str) -> Result<Option<Session>> {
        Ok(self.sessions.lock().expect("session map poisoned").get(id).cloned())
    }

    fn sessions(&self) -> Result<Vec<Session>> {
        let mut v: Vec<Session> = self.sessions.lock().expect("session map poisoned").values().cloned().collect();
        v.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Ok(v)
    }
}
