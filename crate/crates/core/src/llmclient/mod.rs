//! Sequence scoring through an OpenAI-compatible completions endpoint.
//!
//! The request echoes the text back with `max_tokens: 0` and token
//! log-probabilities enabled; the negated sum of the returned log-probs is
//! the feature. The first token has no log-prob (there is no context to
//! condition on) and is skipped, so LLM costs cover one token fewer than
//! local LM costs. Fusion weights absorb the difference.

pub mod mock;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::Scorer;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("environment variable `{0}` with the API key is not set")]
    MissingApiKey(String),
    #[error("HTTP status {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("{} of {total} texts failed, first at index {}: {first}", failed.len(), failed[0])]
    Batch {
        failed: Vec<usize>,
        total: usize,
        first: String,
    },
}

/// API key read from the environment. Never printed or serialized.
#[derive(Clone)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn from_env(var: &str) -> Result<Self, LlmError> {
        match std::env::var(var) {
            Ok(k) if !k.is_empty() => Ok(Self(k)),
            _ => Err(LlmError::MissingApiKey(var.to_string())),
        }
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

/// Endpoint settings. The key itself is not part of the config, only the
/// name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    /// e.g. `https://api.openai.com/v1`; `/completions` is appended.
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Requests per second across all threads.
    pub rate_limit: f64,
    /// First retry delay; doubles on each further retry.
    pub backoff_initial_ms: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/v1".into(),
            model_name: "davinci-002".into(),
            api_key_env: "LLM_API_KEY".into(),
            timeout_secs: 30.0,
            max_retries: 5,
            rate_limit: 10.0,
            backoff_initial_ms: 500,
            cache_dir: None,
        }
    }
}

/// Spaces requests at least `1 / rate` seconds apart (a token bucket of
/// capacity one).
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rate: f64) -> Self {
        let interval = if rate > 0.0 && rate.is_finite() {
            Duration::from_secs_f64(1.0 / rate)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    text: String,
    nll: f64,
}

pub fn cache_key(model: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

/// Sum of the non-null token log-probs of the first choice, negated.
pub fn parse_nll(response: &Value) -> Result<f64, LlmError> {
    let lps = response
        .pointer("/choices/0/logprobs/token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Protocol("missing choices[0].logprobs.token_logprobs".into()))?;
    let mut sum = 0.0;
    for (i, lp) in lps.iter().enumerate() {
        match lp {
            Value::Null => {}
            v => {
                let x = v
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| LlmError::Protocol(format!("token_logprobs[{i}] = {v} is not a number")))?;
                sum += x;
            }
        }
    }
    Ok(-sum)
}

pub struct LlmClient {
    config: LlmEndpointConfig,
    key: ApiKey,
    agent: ureq::Agent,
    limiter: RateLimiter,
    requests: AtomicUsize,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("config", &self.config)
            .field("key", &self.key)
            .finish()
    }
}

enum Attempt {
    Done(f64),
    Retry(LlmError),
    Fail(LlmError),
}

impl LlmClient {
    /// Reads the API key from `config.api_key_env`.
    pub fn new(config: LlmEndpointConfig) -> Result<Self, LlmError> {
        let key = ApiKey::from_env(&config.api_key_env)?;
        Ok(Self::with_key(config, key))
    }

    pub fn with_key(config: LlmEndpointConfig, key: ApiKey) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = RateLimiter::new(config.rate_limit);
        Self {
            config,
            key,
            agent,
            limiter,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    /// Network requests sent so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", cache_key(&self.config.model_name, text))))
    }

    fn cache_get(&self, path: &Path, text: &str) -> Result<Option<f64>, LlmError> {
        let raw = match fs::read_to_string(path) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(LlmError::Cache {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })
            }
        };
        let entry: CacheEntry = serde_json::from_str(&raw).map_err(|e| LlmError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // A hash collision is astronomically unlikely, but checking is free.
        Ok((entry.model == self.config.model_name && entry.text == text).then_some(entry.nll))
    }

    fn cache_put(&self, path: &Path, text: &str, nll: f64) -> Result<(), LlmError> {
        let err = |e: std::io::Error| LlmError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let dir = path.parent().expect("cache file has a parent");
        fs::create_dir_all(dir).map_err(err)?;
        let entry = CacheEntry {
            model: self.config.model_name.clone(),
            text: text.to_string(),
            nll,
        };
        // Write to a unique temp file and rename, so readers never see a
        // partial entry.
        let tmp = dir.join(format!(
            ".{}.{:?}.tmp",
            path.file_name().unwrap().to_string_lossy(),
            thread::current().id()
        ));
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(serde_json::to_string(&entry).expect("serializable").as_bytes())
            .map_err(err)?;
        drop(f);
        fs::rename(&tmp, path).map_err(err)
    }

    fn attempt(&self, text: &str, attempts: u32) -> Attempt {
        self.limiter.acquire();
        self.requests.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model_name,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let sent = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.key.0))
            .send_json(&body);
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => {
                let retryable = matches!(
                    e,
                    ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed
                );
                let err = LlmError::Transport {
                    attempts,
                    message: e.to_string(),
                };
                return if retryable { Attempt::Retry(err) } else { Attempt::Fail(err) };
            }
        };
        let status = resp.status().as_u16();
        if status != 200 {
            let mut body = resp.body_mut().read_to_string().unwrap_or_default();
            body.truncate(200);
            let err = LlmError::Status { status, attempts, body };
            return if status == 429 || status >= 500 {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        match resp.body_mut().read_json::<Value>() {
            Ok(v) => match parse_nll(&v) {
                Ok(nll) => Attempt::Done(nll),
                Err(e) => Attempt::Fail(e),
            },
            Err(e) => Attempt::Fail(LlmError::Protocol(e.to_string())),
        }
    }

    fn fetch(&self, text: &str) -> Result<f64, LlmError> {
        let mut delay = Duration::from_millis(self.config.backoff_initial_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(text, attempts) {
                Attempt::Done(nll) => return Ok(nll),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempts > self.config.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("retrying after {delay:?}: {e}");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    /// Negative log-likelihood of `text`, served from the cache when
    /// possible.
    pub fn sequence_nll(&self, text: &str) -> Result<f64, LlmError> {
        let path = self.cache_path(text);
        if let Some(p) = &path {
            if let Some(v) = self.cache_get(p, text)? {
                return Ok(v);
            }
        }
        let nll = self.fetch(text)?;
        if let Some(p) = &path {
            self.cache_put(p, text, nll)?;
        }
        Ok(nll)
    }

    /// Scores every text, sending one request per distinct text. Results
    /// keep the input order; failures carry the error message.
    pub fn score_each(&self, texts: &[&str]) -> Vec<Result<f64, String>> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let index: Vec<usize> = texts
            .iter()
            .map(|t| {
                *slot.entry(t).or_insert_with(|| {
                    unique.push(t);
                    unique.len() - 1
                })
            })
            .collect();
        let scored: Vec<Result<f64, String>> = unique
            .par_iter()
            .map(|t| self.sequence_nll(t).map_err(|e| e.to_string()))
            .collect();
        index.into_iter().map(|i| scored[i].clone()).collect()
    }

    /// Like [`score_each`](Self::score_each) but fails as a whole, listing
    /// every failed index.
    pub fn batch_score(&self, texts: &[&str]) -> Result<Vec<f64>, LlmError> {
        let results = self.score_each(texts);
        let failed: Vec<usize> = results.iter().enumerate().filter(|(_, r)| r.is_err()).map(|(i, _)| i).collect();
        if let Some(&i) = failed.first() {
            let first = results[i].clone().unwrap_err();
            return Err(LlmError::Batch {
                failed,
                total: texts.len(),
                first,
            });
        }
        Ok(results.into_iter().map(|r| r.unwrap()).collect())
    }
}

/// Fusion feature backed by an [`LlmClient`].
pub struct LlmScorer {
    name: String,
    client: LlmClient,
}

impl LlmScorer {
    pub fn new(name: impl Into<String>, client: LlmClient) -> Self {
        Self {
            name: name.into(),
            client,
        }
    }

    pub fn client(&self) -> &LlmClient {
        &self.client
    }
}

impl Scorer for LlmScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn cache_id(&self) -> String {
        format!("{}:{}", self.name, self.client.config.model_name)
    }

    fn score(&self, text: &str) -> Result<f64, String> {
        self.client.sequence_nll(text).map_err(|e| e.to_string())
    }

    fn score_batch(&self, texts: &[&str]) -> Vec<Result<f64, String>> {
        self.client.score_each(texts)
    }
}
