//! Append-only on-disk logit cache.
//!
//! One JSON record per line: `{"key", "prompt_hash", "candidate", "logit"}`,
//! where `key` is the SHA-256 of the length-prefixed (backend identity,
//! prompt, candidate) triple.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, LogitBackend, LogitQuery, LogitTable};

pub const CACHE_FILE: &str = "logits.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    prompt_hash: String,
    candidate: String,
    logit: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub queries: usize,
    pub hits: usize,
    pub misses: usize,
    pub backend_calls: usize,
}

pub fn cache_key(identity: &str, prompt: &str, candidate: &str) -> String {
    let mut h = Sha256::new();
    for part in [identity, prompt, candidate] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub struct CachedBackend<B> {
    inner: B,
    identity: String,
    entries: RwLock<HashMap<String, f64>>,
    file: Option<(PathBuf, Mutex<File>)>,
    queries: AtomicUsize,
    hits: AtomicUsize,
    misses: AtomicUsize,
    backend_calls: AtomicUsize,
}

impl<B: LogitBackend> CachedBackend<B> {
    /// In-memory cache only.
    pub fn in_memory(inner: B) -> Self {
        let identity = inner.identity();
        Self {
            inner,
            identity,
            entries: RwLock::new(HashMap::new()),
            file: None,
            queries: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            backend_calls: AtomicUsize::new(0),
        }
    }

    /// Opens (or creates) the cache file in `dir` and loads its records.
    pub fn open(inner: B, dir: &Path) -> Result<Self, BackendError> {
        let err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(err)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                    BackendError::Cache(format!("{} line {}: {e}", path.display(), i + 1))
                })?;
                entries.insert(rec.key, rec.logit);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(err)?;
        let mut cache = Self::in_memory(inner);
        *cache.entries.get_mut().expect("fresh lock") = entries;
        cache.file = Some((path, Mutex::new(file)));
        Ok(cache)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            queries: self.queries.load(Ordering::Relaxed),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
        }
    }

    fn store(&self, prompt: &str, table: &LogitTable) -> Result<(), BackendError> {
        let mut entries = self.entries.write().expect("cache lock");
        let prompt_hash = hex::encode(Sha256::digest(prompt.as_bytes()));
        let mut lines = String::new();
        for (candidate, logit) in table.iter() {
            let key = cache_key(&self.identity, prompt, candidate);
            if entries.contains_key(&key) {
                continue;
            }
            if self.file.is_some() {
                let rec = CacheRecord {
                    key: key.clone(),
                    prompt_hash: prompt_hash.clone(),
                    candidate: candidate.to_string(),
                    logit,
                };
                lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                lines.push('\n');
            }
            entries.insert(key, logit);
        }
        if let Some((path, file)) = &self.file {
            if !lines.is_empty() {
                let mut f = file.lock().expect("cache file lock");
                f.write_all(lines.as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(())
    }
}

impl<B: LogitBackend> LogitBackend for CachedBackend<B> {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        self.inner.max_prompt_chars()
    }

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let keys: Vec<String> = query
            .candidates()
            .iter()
            .map(|c| cache_key(&self.identity, query.prompt(), c))
            .collect();
        let mut values: Vec<Option<f64>> = {
            let entries = self.entries.read().expect("cache lock");
            keys.iter().map(|k| entries.get(k).copied()).collect()
        };
        let missing: Vec<String> = query
            .candidates()
            .iter()
            .zip(&values)
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| c.clone())
            .collect();
        self.hits
            .fetch_add(values.len() - missing.len(), Ordering::Relaxed);
        self.misses.fetch_add(missing.len(), Ordering::Relaxed);
        if !missing.is_empty() {
            let sub = LogitQuery::new(query.prompt(), missing)?;
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            let fetched = self.inner.query(&sub)?;
            self.store(query.prompt(), &fetched)?;
            for (c, v) in query.candidates().iter().zip(values.iter_mut()) {
                if v.is_none() {
                    *v = fetched.get(c);
                }
            }
        }
        let logits: Vec<f64> = values
            .into_iter()
            .map(|v| v.ok_or_else(|| BackendError::Protocol("backend omitted a candidate".into())))
            .collect::<Result<_, _>>()?;
        LogitTable::from_aligned(query.candidates(), &logits)
    }
}
