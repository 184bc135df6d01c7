//! In-process mock of the fine-tuning service.
//!
//! Runs an axum server on its own thread and runtime, bound to a loopback
//! port. Job states, rate-limit responses and chat replies are scripted; every
//! request is logged with its arrival time.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use axum::extract::{Multipart, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::remote::JobState;

#[derive(Debug, Clone)]
pub struct MockConfig {
    /// States returned by successive polls of each job; the last one repeats.
    pub job_script: Vec<JobState>,
    pub fine_tuned_model: String,
    /// The first N chat requests get a 429.
    pub rate_limit_first: usize,
    pub retry_after_secs: u64,
    /// (substring of the user message, reply), first match wins.
    pub replies: Vec<(String, String)>,
    pub default_reply: String,
    /// Chat requests whose user message contains any of these get a 500.
    pub fail_substrings: Vec<String>,
    pub expected_api_key: Option<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            job_script: vec![JobState::Queued, JobState::Running, JobState::Succeeded],
            fine_tuned_model: "ft:mock-model:0001".into(),
            rate_limit_first: 0,
            retry_after_secs: 0,
            replies: Vec::new(),
            default_reply: "Support".into(),
            fail_substrings: Vec::new(),
            expected_api_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestLogEntry {
    pub method: String,
    pub path: String,
    pub at: Instant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadedFile {
    pub id: String,
    pub purpose: String,
    pub filename: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct MockJob {
    pub id: String,
    pub request: Value,
    polls: usize,
}

#[derive(Debug)]
struct MockState {
    config: MockConfig,
    log: Mutex<Vec<RequestLogEntry>>,
    uploads: Mutex<Vec<UploadedFile>>,
    jobs: Mutex<HashMap<String, MockJob>>,
    job_order: Mutex<Vec<String>>,
    chat_requests: AtomicUsize,
    chat_bodies: Mutex<Vec<Value>>,
}

impl MockState {
    fn record(&self, method: &str, path: String) {
        self.log.lock().expect("log lock").push(RequestLogEntry {
            method: method.into(),
            path,
            at: Instant::now(),
        });
    }

    #[allow(clippy::result_large_err)]
    fn check_auth(&self, headers: &HeaderMap) -> Result<(), Response> {
        let Some(key) = &self.config.expected_api_key else {
            return Ok(());
        };
        let ok = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == format!("Bearer {key}"));
        if ok {
            Ok(())
        } else {
            Err(error(StatusCode::UNAUTHORIZED, "invalid api key"))
        }
    }
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "error": { "message": message } }))).into_response()
}

async fn upload(
    State(state): State<Arc<MockState>>,
    headers: HeaderMap,
    mut form: Multipart,
) -> Response {
    state.record("POST", "/v1/files".into());
    if let Err(r) = state.check_auth(&headers) {
        return r;
    }
    let mut purpose = String::new();
    let mut file: Option<(String, Vec<u8>)> = None;
    loop {
        match form.next_field().await {
            Ok(Some(field)) => {
                let name = field.name().unwrap_or_default().to_string();
                let filename = field.file_name().unwrap_or_default().to_string();
                let Ok(data) = field.bytes().await else {
                    return error(StatusCode::BAD_REQUEST, "unreadable multipart field");
                };
                match name.as_str() {
                    "purpose" => purpose = String::from_utf8_lossy(&data).into_owned(),
                    "file" => file = Some((filename, data.to_vec())),
                    _ => {}
                }
            }
            Ok(None) => break,
            Err(e) => return error(StatusCode::BAD_REQUEST, &e.to_string()),
        }
    }
    let Some((filename, bytes)) = file else {
        return error(StatusCode::BAD_REQUEST, "missing file field");
    };
    let mut uploads = state.uploads.lock().expect("uploads lock");
    let id = format!("file-{}", uploads.len() + 1);
    let size = bytes.len();
    uploads.push(UploadedFile {
        id: id.clone(),
        purpose: purpose.clone(),
        filename: filename.clone(),
        bytes,
    });
    Json(json!({ "id": id, "object": "file", "purpose": purpose, "filename": filename, "bytes": size }))
        .into_response()
}

async fn create_job(
    State(state): State<Arc<MockState>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> Response {
    state.record("POST", "/v1/fine_tuning/jobs".into());
    if let Err(r) = state.check_auth(&headers) {
        return r;
    }
    let file = body.get("training_file").and_then(Value::as_str).unwrap_or_default();
    if !state.uploads.lock().expect("uploads lock").iter().any(|u| u.id == file) {
        return error(StatusCode::BAD_REQUEST, "unknown training_file");
    }
    let hp = body.get("hyperparameters").cloned().unwrap_or(Value::Null);
    let positive_int = |k: &str| hp.get(k).and_then(Value::as_u64).is_some_and(|v| v >= 1);
    let lr_ok = hp
        .get("learning_rate_multiplier")
        .and_then(Value::as_f64)
        .is_some_and(|v| v > 0.0);
    if !(positive_int("n_epochs") && positive_int("batch_size") && lr_ok) {
        return error(StatusCode::BAD_REQUEST, "invalid hyperparameters");
    }
    let mut jobs = state.jobs.lock().expect("jobs lock");
    let id = format!("ftjob-{}", jobs.len() + 1);
    jobs.insert(
        id.clone(),
        MockJob {
            id: id.clone(),
            request: body.clone(),
            polls: 0,
        },
    );
    state.job_order.lock().expect("job order lock").push(id.clone());
    Json(json!({ "id": id, "object": "fine_tuning.job", "status": "queued", "model": body.get("model") }))
        .into_response()
}

async fn get_job(
    State(state): State<Arc<MockState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    state.record("GET", format!("/v1/fine_tuning/jobs/{id}"));
    if let Err(r) = state.check_auth(&headers) {
        return r;
    }
    let mut jobs = state.jobs.lock().expect("jobs lock");
    let Some(job) = jobs.get_mut(&id) else {
        return error(StatusCode::NOT_FOUND, "no such job");
    };
    let script = &state.config.job_script;
    let status = script[job.polls.min(script.len() - 1)];
    job.polls += 1;
    let model = (status == JobState::Succeeded).then(|| state.config.fine_tuned_model.clone());
    Json(json!({ "id": id, "object": "fine_tuning.job", "status": status, "fine_tuned_model": model }))
        .into_response()
}

async fn chat(
    State(state): State<Arc<MockState>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> Response {
    state.record("POST", "/v1/chat/completions".into());
    if let Err(r) = state.check_auth(&headers) {
        return r;
    }
    let n = state.chat_requests.fetch_add(1, Ordering::SeqCst);
    state.chat_bodies.lock().expect("bodies lock").push(body.clone());
    if n < state.config.rate_limit_first {
        return (
            StatusCode::TOO_MANY_REQUESTS,
            [("retry-after", state.config.retry_after_secs.to_string())],
            Json(json!({ "error": { "message": "rate limit exceeded" } })),
        )
            .into_response();
    }
    let user = body
        .get("messages")
        .and_then(Value::as_array)
        .and_then(|msgs| {
            msgs.iter()
                .rev()
                .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
        })
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    if state.config.fail_substrings.iter().any(|s| user.contains(s.as_str())) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "scripted failure");
    }
    let reply = state
        .config
        .replies
        .iter()
        .find(|(needle, _)| user.contains(needle.as_str()))
        .map(|(_, r)| r.clone())
        .unwrap_or_else(|| state.config.default_reply.clone());
    Json(json!({
        "id": format!("chatcmpl-{}", n + 1),
        "object": "chat.completion",
        "model": body.get("model"),
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": reply },
            "finish_reason": "stop"
        }]
    }))
    .into_response()
}

/// Handle to a running mock server; shuts down on drop.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(config: MockConfig) -> std::io::Result<Self> {
        Self::start_on(config, "127.0.0.1:0")
    }

    pub fn start_on(config: MockConfig, bind: &str) -> std::io::Result<Self> {
        assert!(!config.job_script.is_empty(), "job script must not be empty");
        let state = Arc::new(MockState {
            config,
            log: Mutex::new(Vec::new()),
            uploads: Mutex::new(Vec::new()),
            jobs: Mutex::new(HashMap::new()),
            job_order: Mutex::new(Vec::new()),
            chat_requests: AtomicUsize::new(0),
            chat_bodies: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/files", post(upload))
            .route("/v1/fine_tuning/jobs", post(create_job))
            .route("/v1/fine_tuning/jobs/{id}", get(get_job))
            .route("/v1/chat/completions", post(chat))
            .with_state(state.clone());

        let std_listener = std::net::TcpListener::bind(bind)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(MockServer {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.state.log.lock().expect("log lock").clone()
    }

    pub fn uploads(&self) -> Vec<UploadedFile> {
        self.state.uploads.lock().expect("uploads lock").clone()
    }

    /// Job creation bodies in creation order.
    pub fn job_requests(&self) -> Vec<Value> {
        let jobs = self.state.jobs.lock().expect("jobs lock");
        self.state
            .job_order
            .lock()
            .expect("job order lock")
            .iter()
            .map(|id| jobs[id].request.clone())
            .collect()
    }

    /// Chat requests received, rate-limited ones included.
    pub fn chat_requests(&self) -> usize {
        self.state.chat_requests.load(Ordering::SeqCst)
    }

    pub fn chat_bodies(&self) -> Vec<Value> {
        self.state.chat_bodies.lock().expect("bodies lock").clone()
    }

    /// Blocks until the server is stopped by another thread or process exit.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
