use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::BackendError;

/// Content-addressed, file-backed key/value store.
///
/// One JSON file per key in a single directory; the file name is the SHA-256
/// of the serialized key. Writes go through a temp file and a rename, so
/// concurrent writers of the same key leave one complete record behind.
#[derive(Debug)]
pub struct Cache {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl Cache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key_hash<K: Serialize>(key: &K) -> String {
        let bytes = serde_json::to_vec(key).expect("cache keys serialize");
        hex::encode(Sha256::digest(bytes))
    }

    fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get<K: Serialize, V: DeserializeOwned>(&self, key: &K) -> Option<V> {
        let path = self.path_for(&Self::key_hash(key));
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache record {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put<K: Serialize, V: Serialize>(&self, key: &K, value: &V) -> Result<(), BackendError> {
        let hash = Self::key_hash(key);
        let target = self.path_for(&hash);
        if target.exists() {
            return Ok(());
        }
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".{hash}.{}.{n}.tmp", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(value).expect("cache values serialize"))?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        };
        write().map_err(|e| BackendError::Cache(format!("{}: {e}", target.display())))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
