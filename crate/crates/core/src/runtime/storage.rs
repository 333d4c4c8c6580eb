// SPDX-License-Identifier: Apache-2.0

//! Untrusted model storage.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::Duration;

use super::RuntimeError;

pub trait ModelStore: Send + Sync {
    fn fetch(&self, model_id: &str) -> Result<Vec<u8>, RuntimeError>;
}

pub fn valid_model_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 255 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b)) && !id.starts_with('.')
}

/// One `<model_id>.ssmi` file per model under a directory.
#[derive(Clone, Debug)]
pub struct DirStore {
    root: PathBuf,
    latency: Duration,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirStore { root: root.into(), latency: Duration::ZERO }
    }

    /// Adds a fixed delay to every fetch, standing in for remote storage.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, model_id: &str) -> Result<PathBuf, RuntimeError> {
        if !valid_model_id(model_id) {
            return Err(RuntimeError::Malformed(format!("invalid model id {model_id:?}")));
        }
        Ok(self.root.join(format!("{model_id}.ssmi")))
    }

    pub fn put(&self, model_id: &str, bytes: &[u8]) -> Result<(), RuntimeError> {
        let p = self.path_for(model_id)?;
        std::fs::create_dir_all(&self.root).map_err(|e| RuntimeError::Storage(e.to_string()))?;
        std::fs::write(p, bytes).map_err(|e| RuntimeError::Storage(e.to_string()))
    }
}

impl ModelStore for DirStore {
    fn fetch(&self, model_id: &str) -> Result<Vec<u8>, RuntimeError> {
        let p = self.path_for(model_id)?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        std::fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => RuntimeError::NotFound(model_id.to_owned()),
            _ => RuntimeError::Storage(e.to_string()),
        })
    }
}

#[derive(Default)]
pub struct MemStore {
    files: RwLock<HashMap<String, Vec<u8>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, model_id: &str, bytes: Vec<u8>) {
        self.files.write().unwrap_or_else(|e| e.into_inner()).insert(model_id.to_owned(), bytes);
    }

    pub fn all_bytes(&self) -> Vec<Vec<u8>> {
        self.files.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect()
    }
}

impl ModelStore for MemStore {
    fn fetch(&self, model_id: &str) -> Result<Vec<u8>, RuntimeError> {
        self.files
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(model_id)
            .cloned()
            .ok_or_else(|| RuntimeError::NotFound(model_id.to_owned()))
    }
}

/// Where owners upload encrypted model files.
pub trait ModelSink: Send + Sync {
    fn upload(&self, model_id: &str, bytes: &[u8]) -> Result<(), RuntimeError>;
}

impl ModelSink for DirStore {
    fn upload(&self, model_id: &str, bytes: &[u8]) -> Result<(), RuntimeError> {
        self.put(model_id, bytes)
    }
}

impl ModelSink for MemStore {
    fn upload(&self, model_id: &str, bytes: &[u8]) -> Result<(), RuntimeError> {
        self.put(model_id, bytes.to_vec());
        Ok(())
    }
}
