//! Pluggable numeric predictors behind a chat-completion interface.
//!
//! Every backend answers a rendered [`PromptPair`] with completion text; the
//! gateway parses that text and retries unparseable answers a bounded number
//! of times. [`MockBackend`] is a deterministic local stand-in and
//! [`RemoteBackend`] speaks the OpenAI-compatible chat-completions protocol.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::prompt::{format_number, parse_completion, round_to, NodeTask, PromptPair};

/// Failure talking to a backend. Each one counts as a spent attempt.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl TransportError {
    /// Rate limits, server errors and network trouble are worth waiting out.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Http { status, .. } => *status == 429 || *status >= 500,
            TransportError::Timeout | TransportError::Connection(_) => true,
            TransportError::MalformedResponse(_) => false,
        }
    }
}

/// A text-completion backend.
pub trait CompletionBackend: Send + Sync {
    /// Completes one prompt. `tasks` are the tasks the prompt was rendered
    /// from; remote backends ignore them.
    fn complete(&self, prompt: &PromptPair, tasks: &[NodeTask]) -> Result<String, TransportError>;

    /// Backends that answer instantly are run inline instead of on worker threads.
    fn is_local(&self) -> bool {
        false
    }

    fn name(&self) -> &str;
}

/// The deterministic stand-in predictor: halfway between the previous
/// estimate and the neighbour mean, or the previous estimate alone.
pub fn mock_predict(task: &NodeTask) -> f64 {
    let raw = if task.neighbor_values.is_empty() {
        task.previous
    } else {
        let mean = task.neighbor_values.iter().sum::<f64>() / task.neighbor_values.len() as f64;
        0.5 * task.previous + 0.5 * mean
    };
    round_to(raw, task.precision)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

impl CompletionBackend for MockBackend {
    fn complete(&self, _prompt: &PromptPair, tasks: &[NodeTask]) -> Result<String, TransportError> {
        let lines: Vec<String> = tasks
            .iter()
            .map(|task| format_number(mock_predict(task), task.precision))
            .collect();
        Ok(lines.join("\n"))
    }

    fn is_local(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Remote,
    Mock,
}

/// Predictor settings. Credentials are never stored here; only the name of
/// the environment variable holding them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub backend: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    /// First wait after a transient transport failure; doubles per failure.
    pub retry_backoff_ms: u64,
    pub request_timeout_secs: f64,
    pub max_concurrency: usize,
    /// Tasks rendered into one prompt; 1 sends each node separately.
    pub tasks_per_prompt: usize,
    pub api_key_env: String,
    pub endpoint_env: String,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            endpoint_url: None,
            model_name: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_retries: 3,
            retry_backoff_ms: 200,
            request_timeout_secs: 30.0,
            max_concurrency: 8,
            tasks_per_prompt: 1,
            api_key_env: "OPENAI_API_KEY".into(),
            endpoint_env: "OPENAI_BASE_URL".into(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("predictor: {msg}")));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be finite and nonnegative");
        }
        if !(self.request_timeout_secs > 0.0) || !self.request_timeout_secs.is_finite() {
            return bad("request_timeout_secs must be positive");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be at least 1");
        }
        if self.tasks_per_prompt == 0 {
            return bad("tasks_per_prompt must be at least 1");
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }

    /// Instantiates the configured backend, reading credentials through `env`.
    pub fn backend_with_env(&self, env: impl Fn(&str) -> Option<String>) -> Result<Box<dyn CompletionBackend>> {
        self.validate()?;
        Ok(match self.backend {
            BackendKind::Mock => Box::new(MockBackend),
            BackendKind::Remote => Box::new(RemoteBackend::from_config(self, env)?),
        })
    }

    /// Instantiates the configured backend from process environment variables.
    pub fn backend(&self) -> Result<Box<dyn CompletionBackend>> {
        self.backend_with_env(|name| std::env::var(name).ok().filter(|v| !v.is_empty()))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// Builds the JSON body of a chat-completions request.
pub fn chat_request_body(prompt: &PromptPair, model: &str, temperature: f64) -> serde_json::Value {
    serde_json::to_value(ChatRequest {
        model,
        temperature,
        messages: [
            ChatMessage {
                role: "system",
                content: &prompt.system_text,
            },
            ChatMessage {
                role: "user",
                content: &prompt.user_text,
            },
        ],
    })
    .expect("chat request is always serialisable")
}

/// Extracts `choices[0].message.content` from a chat-completions response body.
pub fn parse_chat_response(body: &str) -> Result<String, TransportError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| TransportError::MalformedResponse(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .ok_or_else(|| TransportError::MalformedResponse("no choices".into()))?
        .message
        .content
        .ok_or_else(|| TransportError::MalformedResponse("choice has no content".into()))
}

/// OpenAI-compatible chat-completions client (blocking).
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
    model: String,
    temperature: f64,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("url", &self.url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Fails before any network traffic when the key or endpoint is missing.
    pub fn from_config(cfg: &PredictorConfig, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let api_key = env(&cfg.api_key_env).ok_or_else(|| {
            Error::Config(format!(
                "remote backend needs an API key in the {} environment variable",
                cfg.api_key_env
            ))
        })?;
        let base = env(&cfg.endpoint_env)
            .or_else(|| cfg.endpoint_url.clone())
            .ok_or_else(|| {
                Error::Config(format!(
                    "remote backend needs `endpoint_url` or the {} environment variable",
                    cfg.endpoint_env
                ))
            })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout())
            .build()
            .map_err(|e| Error::Config(format!("HTTP client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key,
            model: cfg.model_name.clone(),
            temperature: cfg.temperature,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Sends one chat-completions request; no retries at this layer.
    pub fn remote_complete(&self, prompt: &PromptPair) -> Result<String, TransportError> {
        let body = chat_request_body(prompt, &self.model, self.temperature);
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        if status.as_u16() >= 400 {
            return Err(TransportError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        parse_chat_response(&text)
    }
}

fn classify(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else if e.is_decode() {
        TransportError::MalformedResponse(e.to_string())
    } else {
        TransportError::Connection(e.to_string())
    }
}

impl CompletionBackend for RemoteBackend {
    fn complete(&self, prompt: &PromptPair, _tasks: &[NodeTask]) -> Result<String, TransportError> {
        self.remote_complete(prompt)
    }

    fn name(&self) -> &str {
        "remote"
    }
}

/// Outcome of one node's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub node: usize,
    pub t: u64,
    pub value: f64,
    /// Backend calls spent, between 1 and `max_retries + 1`.
    pub attempts: u32,
    pub backend_latency_ms: u64,
    /// Retries were exhausted and `value` is the fallback (previous estimate).
    pub flagged: bool,
    /// User message of the last attempt.
    pub prompt: String,
    pub completion: Option<String>,
    pub error: Option<String>,
}

fn backoff(base_ms: u64, failures: u32) -> Duration {
    Duration::from_millis(base_ms.saturating_mul(1 << (failures - 1).min(5)).min(10_000))
}

fn predict_chunk(
    chunk: &[NodeTask],
    cfg: &PredictorConfig,
    backend: &dyn CompletionBackend,
) -> Result<Vec<PredictionResult>> {
    let precision = chunk[0].precision;
    let mut attempts = 0u32;
    let mut latency = Duration::ZERO;
    let mut last_completion = None;
    let mut last_error = None;
    let mut prompt = PromptPair::render(chunk)?;
    let mut transient = 0u32;

    while attempts <= cfg.max_retries {
        if attempts > 0 {
            // the prompt is regenerated for every resubmission
            prompt = PromptPair::render(chunk)?;
        }
        attempts += 1;
        let started = Instant::now();
        let answer = backend.complete(&prompt, chunk);
        latency += started.elapsed();
        match answer {
            Ok(text) => {
                let parsed = parse_completion(&text, chunk.len(), precision);
                last_completion = Some(text);
                match parsed {
                    Ok(values) => {
                        return Ok(chunk
                            .iter()
                            .zip(values)
                            .map(|(task, value)| PredictionResult {
                                node: task.node,
                                t: task.t,
                                value,
                                attempts,
                                backend_latency_ms: latency.as_millis() as u64,
                                flagged: false,
                                prompt: prompt.user_text.clone(),
                                completion: last_completion.clone(),
                                error: None,
                            })
                            .collect())
                    }
                    Err(e) => last_error = Some(e.to_string()),
                }
            }
            Err(e) => {
                if e.is_transient() && attempts <= cfg.max_retries {
                    transient += 1;
                    std::thread::sleep(backoff(cfg.retry_backoff_ms, transient));
                }
                last_error = Some(e.to_string());
            }
        }
        log::debug!(
            "attempt {attempts} for nodes {:?} at t={} failed: {}",
            prompt.task_refs.iter().map(|r| r.0).collect::<Vec<_>>(),
            chunk[0].t,
            last_error.as_deref().unwrap_or("")
        );
    }
    log::warn!(
        "giving up on {} task(s) at t={} after {attempts} attempts",
        chunk.len(),
        chunk[0].t
    );
    Ok(chunk
        .iter()
        .map(|task| PredictionResult {
            node: task.node,
            t: task.t,
            value: task.previous,
            attempts,
            backend_latency_ms: latency.as_millis() as u64,
            flagged: true,
            prompt: prompt.user_text.clone(),
            completion: last_completion.clone(),
            error: last_error.clone(),
        })
        .collect())
}

/// Predicts every task, preserving order. Tasks are grouped
/// `tasks_per_prompt` at a time and dispatched with at most
/// `max_concurrency` simultaneous backend calls. Backend and parse failures
/// are retried; exhausted tasks fall back to their previous estimate and are
/// flagged rather than failing the batch.
pub fn predict_batch(
    tasks: &[NodeTask],
    cfg: &PredictorConfig,
    backend: &dyn CompletionBackend,
) -> Result<Vec<PredictionResult>> {
    cfg.validate()?;
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("predict_batch needs at least one task".into()))?;
    if tasks.iter().any(|task| task.t != first.t) {
        return Err(Error::InvalidArgument("all tasks in a batch must share t".into()));
    }

    let chunks: Vec<&[NodeTask]> = tasks.chunks(cfg.tasks_per_prompt).collect();
    let workers = cfg.max_concurrency.min(chunks.len());
    if workers <= 1 || backend.is_local() {
        let mut out = Vec::with_capacity(tasks.len());
        for chunk in chunks {
            out.extend(predict_chunk(chunk, cfg, backend)?);
        }
        return Ok(out);
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Vec<PredictionResult>>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(chunk) = chunks.get(i) else { break };
                let res = predict_chunk(chunk, cfg, backend);
                slots.lock().expect("result slots poisoned")[i] = Some(res);
            });
        }
    });
    let mut out = Vec::with_capacity(tasks.len());
    for slot in slots.into_inner().expect("result slots poisoned") {
        out.extend(slot.expect("every chunk is processed")?);
    }
    Ok(out)
}
