//! Logit providers.
//!
//! A backend maps a prompt and an ordered list of candidate words to one raw
//! logit per candidate. A candidate's logit is the logit of its first
//! vocabulary token at the position following the prompt; tokenization is the
//! provider's business, the client only ever sends candidate strings.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

mod cache;
mod http;
mod synthetic;

pub use cache::{CacheStats, CachedBackend};
pub use http::{HttpBackend, RetryPolicy, ENDPOINT_ENV};
pub use synthetic::{
    noise_unit, synthetic_logit, SyntheticBackend, SyntheticModelSpec, SyntheticSample,
};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("prompt of {length} chars exceeds the backend budget of {budget} chars")]
    PromptTooLong { length: usize, budget: usize },

    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("synthetic backend: {0}")]
    Synthetic(String),

    #[error("logit cache: {0}")]
    Cache(String),

    #[error("query {index} failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogitQuery {
    prompt: String,
    candidates: Vec<String>,
}

impl LogitQuery {
    pub fn new(prompt: impl Into<String>, candidates: Vec<String>) -> Result<Self, BackendError> {
        if candidates.is_empty() {
            return Err(BackendError::InvalidQuery("no candidates".into()));
        }
        for (i, c) in candidates.iter().enumerate() {
            if candidates[..i].contains(c) {
                return Err(BackendError::InvalidQuery(format!(
                    "duplicate candidate {c:?}"
                )));
            }
        }
        Ok(Self {
            prompt: prompt.into(),
            candidates,
        })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }
}

/// One logit per requested candidate, in request order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTable(IndexMap<String, f64>);

impl LogitTable {
    /// Pairs candidates with logits; rejects misaligned or non-finite values.
    pub fn from_aligned(candidates: &[String], logits: &[f64]) -> Result<Self, BackendError> {
        if candidates.len() != logits.len() {
            return Err(BackendError::Protocol(format!(
                "expected {} logits, got {}",
                candidates.len(),
                logits.len()
            )));
        }
        let mut map = IndexMap::with_capacity(candidates.len());
        for (c, &v) in candidates.iter().zip(logits) {
            if !v.is_finite() {
                return Err(BackendError::Protocol(format!(
                    "non-finite logit for {c:?}"
                )));
            }
            map.insert(c.clone(), v);
        }
        Ok(Self(map))
    }

    pub fn get(&self, candidate: &str) -> Option<f64> {
        self.0.get(candidate).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Logits in the order of `candidates`.
    pub fn aligned(&self, candidates: &[String]) -> Result<Vec<f64>, BackendError> {
        candidates
            .iter()
            .map(|c| {
                self.get(c)
                    .ok_or_else(|| BackendError::Protocol(format!("missing logit for {c:?}")))
            })
            .collect()
    }
}

pub trait LogitBackend: Send + Sync {
    /// Stable name of the model behind the backend; part of every cache key.
    fn identity(&self) -> String;

    /// Prompt length budget in characters, if the backend has one.
    fn max_prompt_chars(&self) -> Option<usize>;

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError>;
}

impl<B: LogitBackend + ?Sized> LogitBackend for &B {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        (**self).max_prompt_chars()
    }

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        (**self).query(query)
    }
}

impl<B: LogitBackend + ?Sized> LogitBackend for Box<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        (**self).max_prompt_chars()
    }

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        (**self).query(query)
    }
}

impl<B: LogitBackend + ?Sized> LogitBackend for std::sync::Arc<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        (**self).max_prompt_chars()
    }

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        (**self).query(query)
    }
}

/// Runs `queries` with at most `parallelism` in flight. Results are aligned
/// with `queries`; on failure the lowest failing index is reported.
pub fn batch_query(
    backend: &dyn LogitBackend,
    queries: &[LogitQuery],
    parallelism: usize,
) -> Result<Vec<LogitTable>, BackendError> {
    if parallelism == 0 {
        return Err(BackendError::InvalidQuery(
            "parallelism must be at least 1".into(),
        ));
    }
    let fail = |index: usize, e: BackendError| BackendError::Batch {
        index,
        source: Box::new(e),
    };
    let workers = parallelism.min(queries.len());
    if workers <= 1 {
        return queries
            .iter()
            .enumerate()
            .map(|(i, q)| backend.query(q).map_err(|e| fail(i, e)))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<LogitTable, BackendError>>>> =
        queries.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let res = backend.query(&queries[i]);
                if res.is_err() {
                    stop.store(true, Ordering::Relaxed);
                }
                *slots[i].lock().expect("slot lock") = Some(res);
            });
        }
    });

    let mut out = Vec::with_capacity(queries.len());
    let mut first_err = None;
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(t)) => out.push(t),
            Some(Err(e)) => {
                first_err = Some(fail(i, e));
                break;
            }
            // Skipped after an earlier failure elsewhere; keep scanning for it.
            None => continue,
        }
    }
    match first_err {
        Some(e) => Err(e),
        None if out.len() == queries.len() => Ok(out),
        None => Err(BackendError::Protocol("batch aborted".into())),
    }
}
