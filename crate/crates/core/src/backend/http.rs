use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, LogitBackend, LogitQuery, LogitTable};

/// Environment variable holding the default logit-server endpoint.
pub const ENDPOINT_ENV: &str = "ICL_LOGIT_ENDPOINT";

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Deserialize)]
struct InfoResponse {
    model: String,
    max_prompt_chars: usize,
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    prompt: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Vec<f64>,
}

#[derive(Deserialize)]
struct TooLongResponse {
    max_prompt_chars: usize,
}

/// Client for the `POST /logits`, `GET /info` wire protocol.
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    model: String,
    max_prompt_chars: usize,
    retry: RetryPolicy,
}

impl HttpBackend {
    /// Connects and fetches `/info`.
    pub fn connect(endpoint: &str) -> Result<Self, BackendError> {
        Self::connect_with(endpoint, RetryPolicy::default())
    }

    pub fn connect_with(endpoint: &str, retry: RetryPolicy) -> Result<Self, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let mut backend = Self {
            endpoint,
            agent,
            model: String::new(),
            max_prompt_chars: 0,
            retry,
        };
        let info: InfoResponse = backend.with_retries(|b| b.get_info())?;
        backend.model = info.model;
        backend.max_prompt_chars = info.max_prompt_chars;
        Ok(backend)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn with_retries<T>(
        &self,
        mut op: impl FnMut(&Self) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let attempts = self.retry.attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op(self) {
                Err(BackendError::Transport { message, .. }) if attempt < attempts => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                    log::warn!("transport error (attempt {attempt}/{attempts}): {message}");
                    std::thread::sleep(delay);
                }
                Err(BackendError::Transport { message, .. }) => {
                    return Err(BackendError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                other => return other,
            }
        }
    }

    fn transport(e: ureq::Error) -> BackendError {
        BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        }
    }

    fn get_info(&self) -> Result<InfoResponse, BackendError> {
        let mut resp = self
            .agent
            .get(format!("{}/info", self.endpoint))
            .call()
            .map_err(Self::transport)?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Status { status, body });
        }
        resp.body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(format!("/info: {e}")))
    }

    fn post_logits(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        let mut resp = self
            .agent
            .post(format!("{}/logits", self.endpoint))
            .send_json(LogitsRequest {
                prompt: query.prompt(),
                candidates: query.candidates(),
            })
            .map_err(Self::transport)?;
        let status = resp.status().as_u16();
        match status {
            200 => {
                let body: LogitsResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| BackendError::Protocol(format!("/logits: {e}")))?;
                LogitTable::from_aligned(query.candidates(), &body.logits)
            }
            413 => {
                let budget = resp
                    .body_mut()
                    .read_json::<TooLongResponse>()
                    .map(|b| b.max_prompt_chars)
                    .unwrap_or(self.max_prompt_chars);
                Err(BackendError::PromptTooLong {
                    length: query.prompt().chars().count(),
                    budget,
                })
            }
            502..=504 => Err(BackendError::Transport {
                attempts: 1,
                message: format!("status {status}"),
            }),
            _ => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                Err(BackendError::Status { status, body })
            }
        }
    }
}

impl LogitBackend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}", self.model)
    }

    fn max_prompt_chars(&self) -> Option<usize> {
        Some(self.max_prompt_chars)
    }

    fn query(&self, query: &LogitQuery) -> Result<LogitTable, BackendError> {
        let length = query.prompt().chars().count();
        if length > self.max_prompt_chars {
            return Err(BackendError::PromptTooLong {
                length,
                budget: self.max_prompt_chars,
            });
        }
        self.with_retries(|b| b.post_logits(query))
    }
}
