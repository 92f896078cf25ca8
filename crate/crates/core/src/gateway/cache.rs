//! Response cache keyed by `(backend id, request hash)`, optionally persisted on disk as one
//! JSON file per key.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::wire::ScoreResponse;
use crate::error::{Error, Result};

/// Environment variable naming the on-disk cache directory.
pub const CACHE_DIR_ENV: &str = "CTXPRED_CACHE_DIR";

#[derive(Debug, Default)]
pub struct ResponseCache {
    memory: Mutex<HashMap<String, ScoreResponse>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache {
            memory: Mutex::default(),
            dir: Some(dir),
        })
    }

    /// Disk cache from [`CACHE_DIR_ENV`] when set, memory-only otherwise.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => ResponseCache::on_disk(PathBuf::from(dir)),
            _ => Ok(ResponseCache::in_memory()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<ScoreResponse> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let path = self.path_for(key)?;
        let text = std::fs::read_to_string(path).ok()?;
        let resp: ScoreResponse = serde_json::from_str(&text).ok()?;
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), resp.clone());
        Some(resp)
    }

    pub fn put(&self, key: &str, response: &ScoreResponse) -> Result<()> {
        if let Some(path) = self.path_for(key) {
            let parent = path.parent().expect("cache entries live in a shard dir");
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            std::fs::write(&tmp, serde_json::to_vec(response)?).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), response.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
