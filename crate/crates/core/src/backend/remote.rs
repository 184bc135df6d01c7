//! Client for a hosted fine-tuning and chat-completions service.
//!
//! Endpoints: `POST /v1/files`, `POST /v1/fine_tuning/jobs`,
//! `GET /v1/fine_tuning/jobs/{id}`, `POST /v1/chat/completions`.
//! Requests share a rate limiter and a retry policy; chat responses are cached
//! by a hash of (model, messages).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use reqwest::blocking::{multipart, Client, RequestBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{BackendError, Classifier, ClassifierFactory, Hyperparameters, PredictionResult};
use crate::corpus::{to_chat_example, to_inference_example, to_jsonl_bytes, ChatMessage, LabeledExample};
use crate::taxonomy::Taxonomy;

pub const API_KEY_ENV: &str = "FUNC_DA_API_KEY";
pub const BASE_URL_ENV: &str = "FUNC_DA_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "http://127.0.0.1:8787";

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("authentication failed ({status}): {message}")]
    Auth { status: u16, message: String },
    #[error("rate limited: {message}")]
    RateLimited {
        retry_after: Option<Duration>,
        message: String,
    },
    #[error("request rejected ({status}): {message}")]
    Validation { status: u16, message: String },
    #[error("server error ({status}): {message}")]
    Server { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error("job {job_id} did not finish within {waited:?}")]
    Timeout { job_id: String, waited: Duration },
    #[error("response cache {path}: {message}")]
    Cache { path: String, message: String },
}

impl RemoteError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            RemoteError::RateLimited { .. } | RemoteError::Server { .. } | RemoteError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Backoff before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// A server-provided retry-after wins over the computed backoff.
    pub fn delay(&self, attempt: u32, error: &RemoteError) -> Duration {
        match error {
            RemoteError::RateLimited {
                retry_after: Some(d),
                ..
            } => *d,
            _ => self.backoff(attempt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Read from the environment only; never serialized.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub base_model: String,
    pub retry: RetryPolicy,
    /// Minimum spacing between any two requests.
    pub min_request_interval: Duration,
    pub max_in_flight: usize,
    pub poll_interval: Duration,
    pub poll_timeout: Duration,
    pub request_timeout: Duration,
    pub cache_path: Option<PathBuf>,
    pub system_message: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: DEFAULT_BASE_URL.into(),
            api_key: None,
            base_model: "gpt-3.5-turbo".into(),
            retry: RetryPolicy::default(),
            min_request_interval: Duration::from_millis(50),
            max_in_flight: 4,
            poll_interval: Duration::from_secs(10),
            poll_timeout: Duration::from_secs(6 * 3600),
            request_timeout: Duration::from_secs(120),
            cache_path: None,
            system_message: None,
        }
    }
}

impl RemoteConfig {
    /// Defaults with base URL and API key taken from the environment.
    pub fn from_env() -> Self {
        let mut cfg = RemoteConfig::default();
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.trim().is_empty() {
                cfg.base_url = url.trim().to_string();
            }
        }
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        cfg
    }
}

/// Hands out send slots at least `min_interval` apart.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        RateLimiter {
            min_interval,
            next_slot: Mutex::new(None),
        }
    }

    /// Blocks until this caller's slot arrives.
    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.min_interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    content: String,
}

/// In-memory response cache, optionally mirrored to an append-only JSONL file.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<String, String>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn open(path: &Path) -> Result<Self, RemoteError> {
        let cache_err = |message: String| RemoteError::Cache {
            path: path.display().to_string(),
            message,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| cache_err(e.to_string()))?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line)
                    .map_err(|e| cache_err(format!("line {}: {e}", idx + 1)))?;
                entries.insert(entry.key, entry.content);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(e.to_string()))?;
        Ok(ResponseCache {
            entries: Mutex::new(entries),
            file: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn key(model: &str, messages: &[ChatMessage]) -> String {
        let payload = json!({ "model": model, "messages": messages });
        let digest = Sha256::digest(payload.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: String, content: String) -> Result<(), RemoteError> {
        if let Some((path, file)) = &self.file {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                content: content.clone(),
            })
            .expect("cache line serializes");
            let mut f = file.lock().expect("cache file lock");
            writeln!(f, "{line}").map_err(|e| RemoteError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        self.entries.lock().expect("cache lock").insert(key, content);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    #[serde(alias = "validating_files")]
    Queued,
    #[serde(alias = "in_progress")]
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Succeeded => "succeeded",
            JobState::Failed => "failed",
            JobState::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJobSpec {
    pub training_file: String,
    pub model: String,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJobStatus {
    pub id: String,
    pub status: JobState,
    pub fine_tuned_model: Option<String>,
}

/// Blocking HTTP client for the fine-tuning protocol.
#[derive(Debug)]
pub struct RemoteClient {
    http: Client,
    config: RemoteConfig,
    limiter: RateLimiter,
    cache: ResponseCache,
    wire_calls: AtomicU64,
}

fn parse_retry_after(value: Option<&reqwest::header::HeaderValue>) -> Option<Duration> {
    let secs: f64 = value?.to_str().ok()?.trim().parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| Duration::from_secs_f64(secs))
}

fn error_for_status(status: u16, retry_after: Option<Duration>, body: String) -> RemoteError {
    let message = serde_json::from_str::<Value>(&body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or(body);
    match status {
        401 | 403 => RemoteError::Auth { status, message },
        429 => RemoteError::RateLimited {
            retry_after,
            message,
        },
        400..=499 => RemoteError::Validation { status, message },
        _ => RemoteError::Server { status, message },
    }
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self, RemoteError> {
        let cache = match &config.cache_path {
            Some(path) => ResponseCache::open(path)?,
            None => ResponseCache::in_memory(),
        };
        let http = Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        Ok(RemoteClient {
            http,
            limiter: RateLimiter::new(config.min_request_interval),
            cache,
            wire_calls: AtomicU64::new(0),
            config,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// HTTP requests actually sent, retries included.
    pub fn wire_calls(&self) -> u64 {
        self.wire_calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn send_once(&self, request: RequestBuilder) -> Result<Value, RemoteError> {
        self.limiter.acquire();
        self.wire_calls.fetch_add(1, Ordering::SeqCst);
        let request = match &self.config.api_key {
            Some(key) => request.bearer_auth(key),
            None => request,
        };
        let response = request
            .send()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let retry_after = parse_retry_after(response.headers().get(reqwest::header::RETRY_AFTER));
        let body = response
            .text()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(error_for_status(status, retry_after, body));
        }
        serde_json::from_str(&body).map_err(|e| RemoteError::Decode(format!("{e}: {body}")))
    }

    /// Sends with retries; `build` is called afresh for every attempt.
    fn send(&self, build: impl Fn() -> RequestBuilder) -> Result<Value, RemoteError> {
        let max = self.config.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.send_once(build()) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < max => {
                    let delay = self.config.retry.delay(attempt, &e);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying request");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn field<'a>(value: &'a Value, key: &str) -> Result<&'a str, RemoteError> {
        value
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| RemoteError::Decode(format!("missing string field {key:?} in {value}")))
    }

    /// Uploads a JSONL training file; returns the file id.
    pub fn upload_file(&self, filename: &str, bytes: &[u8]) -> Result<String, RemoteError> {
        let url = self.url("/v1/files");
        let v = self.send(|| {
            let part = multipart::Part::bytes(bytes.to_vec())
                .file_name(filename.to_string())
                .mime_str("application/jsonl")
                .expect("static mime type parses");
            let form = multipart::Form::new()
                .text("purpose", "fine-tune")
                .part("file", part);
            self.http.post(&url).multipart(form)
        })?;
        Ok(Self::field(&v, "id")?.to_string())
    }

    pub fn create_finetune_job(&self, spec: &RemoteJobSpec) -> Result<String, RemoteError> {
        spec.hyperparameters
            .validate()
            .map_err(|e| RemoteError::Validation {
                status: 0,
                message: e.to_string(),
            })?;
        let body = json!({
            "training_file": spec.training_file,
            "model": spec.model,
            "hyperparameters": {
                "n_epochs": spec.hyperparameters.epochs,
                "batch_size": spec.hyperparameters.batch_size,
                "learning_rate_multiplier": spec.hyperparameters.lr_multiplier,
            }
        });
        let url = self.url("/v1/fine_tuning/jobs");
        let v = self.send(|| self.http.post(&url).json(&body))?;
        Ok(Self::field(&v, "id")?.to_string())
    }

    pub fn poll_job(&self, job_id: &str) -> Result<RemoteJobStatus, RemoteError> {
        let url = self.url(&format!("/v1/fine_tuning/jobs/{job_id}"));
        let v = self.send(|| self.http.get(&url))?;
        let status: RemoteJobStatus =
            serde_json::from_value(v.clone()).map_err(|e| RemoteError::Decode(format!("{e}: {v}")))?;
        let has_model = status.fine_tuned_model.as_deref().is_some_and(|m| !m.is_empty());
        if (status.status == JobState::Succeeded) != has_model {
            return Err(RemoteError::Decode(format!(
                "job {} is {} but fine_tuned_model is {:?}",
                status.id,
                status.status.as_str(),
                status.fine_tuned_model
            )));
        }
        Ok(status)
    }

    /// Polls until the job reaches a terminal state. Returns every polled
    /// state in order together with the final status.
    pub fn wait_for_job(&self, job_id: &str) -> Result<(Vec<JobState>, RemoteJobStatus), RemoteError> {
        let start = Instant::now();
        let mut observed = Vec::new();
        loop {
            let status = self.poll_job(job_id)?;
            observed.push(status.status);
            if status.status.is_terminal() {
                return Ok((observed, status));
            }
            if start.elapsed() >= self.config.poll_timeout {
                return Err(RemoteError::Timeout {
                    job_id: job_id.to_string(),
                    waited: start.elapsed(),
                });
            }
            std::thread::sleep(self.config.poll_interval);
        }
    }

    /// Chat completion at temperature 0; returns the first choice's content.
    pub fn chat(&self, model: &str, messages: &[ChatMessage]) -> Result<(String, bool), RemoteError> {
        let key = ResponseCache::key(model, messages);
        if let Some(hit) = self.cache.get(&key) {
            return Ok((hit, true));
        }
        let body = json!({ "model": model, "messages": messages, "temperature": 0 });
        let url = self.url("/v1/chat/completions");
        let v = self.send(|| self.http.post(&url).json(&body))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| RemoteError::Decode(format!("no choices[0].message.content in {v}")))?
            .to_string();
        self.cache.insert(key, content.clone())?;
        Ok((content, false))
    }

    pub fn remote_predict(&self, model: &str, prompt: &str) -> Result<PredictionResult, RemoteError> {
        let messages = [ChatMessage {
            role: "user".into(),
            content: prompt.to_string(),
        }];
        let (raw_text, cached) = self.chat(model, &messages)?;
        Ok(PredictionResult {
            raw_text,
            probabilities: None,
            cached,
        })
    }
}

/// Classifier backed by a fine-tuned remote model.
#[derive(Debug, Clone)]
pub struct RemoteClassifier {
    client: Arc<RemoteClient>,
    model_id: String,
    taxonomy: Taxonomy,
}

impl RemoteClassifier {
    pub fn new(client: Arc<RemoteClient>, model_id: impl Into<String>, taxonomy: Taxonomy) -> Self {
        RemoteClassifier {
            client,
            model_id: model_id.into(),
            taxonomy,
        }
    }

    /// Waits for a fine-tuning job and binds to its model.
    pub fn from_job(client: Arc<RemoteClient>, job_id: &str, taxonomy: Taxonomy) -> Result<Self, BackendError> {
        let (_, status) = client.wait_for_job(job_id)?;
        match (status.status, status.fine_tuned_model) {
            (JobState::Succeeded, Some(model)) => Ok(RemoteClassifier::new(client, model, taxonomy)),
            (state, _) => Err(BackendError::JobNotSucceeded {
                job_id: job_id.to_string(),
                status: state.as_str().to_string(),
            }),
        }
    }

    pub fn client(&self) -> &RemoteClient {
        &self.client
    }
}

impl Classifier for RemoteClassifier {
    fn id(&self) -> &str {
        &self.model_id
    }

    fn ensure_ready(&self) -> Result<(), BackendError> {
        if self.model_id.trim().is_empty() {
            return Err(BackendError::NotReady("no fine-tuned model id".into()));
        }
        Ok(())
    }

    fn predict(&self, part_name: &str, assembly_name: &str) -> Result<PredictionResult, BackendError> {
        let example = to_inference_example(
            part_name,
            assembly_name,
            &self.taxonomy,
            self.client.config.system_message.as_deref(),
        )?;
        let (raw_text, cached) = self.client.chat(&self.model_id, &example.request_messages())?;
        Ok(PredictionResult {
            raw_text,
            probabilities: None,
            cached,
        })
    }

    /// At most `max_in_flight` requests run at once; output order matches
    /// `queries`.
    fn predict_many(&self, queries: &[(String, String)]) -> Vec<Result<PredictionResult, BackendError>> {
        let workers = self.client.config.max_in_flight.clamp(1, queries.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<PredictionResult, BackendError>>>> =
            queries.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= queries.len() {
                        break;
                    }
                    let (part, assembly) = &queries[i];
                    *slots[i].lock().expect("result slot") = Some(self.predict(part, assembly));
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("result slot").expect("every slot filled"))
            .collect()
    }
}

/// Runs one remote fine-tuning job per search trial.
#[derive(Debug, Clone)]
pub struct RemoteFactory {
    pub client: Arc<RemoteClient>,
    pub taxonomy: Taxonomy,
}

impl ClassifierFactory for RemoteFactory {
    fn build(
        &self,
        hp: &Hyperparameters,
        train: &[LabeledExample],
        trial: usize,
    ) -> Result<Box<dyn Classifier>, BackendError> {
        hp.validate()?;
        if train.is_empty() {
            return Err(BackendError::EmptyTrainingSet);
        }
        let system = self.client.config.system_message.as_deref();
        let examples = train
            .iter()
            .map(|ex| to_chat_example(ex, &self.taxonomy, system))
            .collect::<Result<Vec<_>, _>>()?;
        let file_id = self
            .client
            .upload_file(&format!("trial-{trial}.jsonl"), &to_jsonl_bytes(&examples))?;
        let job_id = self.client.create_finetune_job(&RemoteJobSpec {
            training_file: file_id,
            model: self.client.config.base_model.clone(),
            hyperparameters: *hp,
        })?;
        tracing::info!(trial, %hp, job_id, "fine-tuning job created");
        Ok(Box::new(RemoteClassifier::from_job(
            self.client.clone(),
            &job_id,
            self.taxonomy.clone(),
        )?))
    }
}
