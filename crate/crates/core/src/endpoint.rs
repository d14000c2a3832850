//! Chat-completion endpoint access: wire types, an HTTP backend, retry with
//! exponential backoff, a shared request limiter and in-process mocks.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Request body sent to `{base_url}/chat/completions`.
///
/// `guided_choice` restricts generation to one of the listed strings on
/// servers that implement guided decoding; it is omitted otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guided_choice: Option<Vec<String>>,
}

impl ChatRequest {
    pub fn user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Extracts the first choice's message content from a response body.
pub fn parse_response_body(body: &str) -> Result<String, EndpointError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| EndpointError::Malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content.unwrap_or_default())
        .ok_or_else(|| EndpointError::Malformed("response has no choices".into()))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EndpointError {
    /// Worth retrying: 429, 5xx, timeouts, connection failures.
    #[error("transient failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    /// Any other 4xx.
    #[error("permanent failure (status {status}): {message}")]
    Permanent { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl EndpointError {
    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        let message = message.into();
        if status == 429 || status >= 500 {
            EndpointError::Transient {
                status: Some(status),
                message,
            }
        } else {
            EndpointError::Permanent { status, message }
        }
    }

    pub fn is_transient(&self) -> bool {
        matches!(self, EndpointError::Transient { .. })
    }
}

pub trait ChatEndpoint: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, EndpointError>;

    fn model(&self) -> &str;

    /// Whether `guided_choice` in a request is honored.
    fn supports_guided(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default)]
    pub guided: bool,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_max_attempts() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    30_000
}
fn default_max_concurrent() -> usize {
    8
}

impl EndpointConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts.max(1),
            base_delay: Duration::from_millis(self.backoff_ms),
            max_delay: Duration::from_millis(self.max_backoff_ms),
        }
    }

    pub fn limiter(&self) -> RateLimiter {
        RateLimiter::new(self.max_concurrent, self.requests_per_minute)
    }
}

/// Blocking HTTP backend for hosted or self-served chat-completion APIs.
pub struct HttpEndpoint {
    url: String,
    model: String,
    auth_token: Option<String>,
    guided: bool,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(cfg: &EndpointConfig, auth_token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            model: cfg.model.clone(),
            auth_token,
            guided: cfg.guided,
            agent,
        }
    }
}

impl ChatEndpoint for HttpEndpoint {
    fn chat(&self, request: &ChatRequest) -> Result<String, EndpointError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(request).map_err(|e| EndpointError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EndpointError::Transient {
                status: Some(status),
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            return Err(EndpointError::from_status(status, body));
        }
        parse_response_body(&body)
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn supports_guided(&self) -> bool {
        self.guided
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`,
    /// capped at `max_delay`.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: default_max_attempts(),
            base_delay: Duration::from_millis(default_backoff_ms()),
            max_delay: Duration::from_millis(default_max_backoff_ms()),
        }
    }
}

struct LimiterState {
    in_flight: usize,
    starts: VecDeque<Instant>,
}

/// Caps concurrent requests and, optionally, requests started per minute.
/// One limiter is shared by every worker talking to the same endpoint.
pub struct RateLimiter {
    max_concurrent: usize,
    per_minute: Option<u32>,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().expect("limiter poisoned");
        st.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RateLimiter {
    pub fn new(max_concurrent: usize, per_minute: Option<u32>) -> Self {
        Self {
            max_concurrent: max_concurrent.max(1),
            per_minute: per_minute.filter(|&n| n > 0),
            state: Mutex::new(LimiterState {
                in_flight: 0,
                starts: VecDeque::new(),
            }),
            freed: Condvar::new(),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX, None)
    }

    pub fn acquire(&self) -> Permit<'_> {
        const WINDOW: Duration = Duration::from_secs(60);
        let mut st = self.state.lock().expect("limiter poisoned");
        loop {
            if st.in_flight >= self.max_concurrent {
                st = self.freed.wait(st).expect("limiter poisoned");
                continue;
            }
            if let Some(rpm) = self.per_minute {
                let now = Instant::now();
                while st.starts.front().is_some_and(|t| now.duration_since(*t) >= WINDOW) {
                    st.starts.pop_front();
                }
                if st.starts.len() >= rpm as usize {
                    let wait = WINDOW - now.duration_since(*st.starts.front().expect("non-empty"));
                    st = self.freed.wait_timeout(st, wait).expect("limiter poisoned").0;
                    continue;
                }
                st.starts.push_back(now);
            }
            st.in_flight += 1;
            return Permit { limiter: self };
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("limiter poisoned").in_flight
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: EndpointError },
    #[error("request rejected after {attempts} attempt(s): {error}")]
    Permanent { attempts: u32, error: EndpointError },
}

impl ClientError {
    pub fn attempts(&self) -> u32 {
        match self {
            ClientError::Exhausted { attempts, .. } | ClientError::Permanent { attempts, .. } => {
                *attempts
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    pub attempts: u32,
}

/// An endpoint plus its retry policy and shared limiter.
#[derive(Clone)]
pub struct CompletionClient {
    endpoint: Arc<dyn ChatEndpoint>,
    policy: RetryPolicy,
    limiter: Arc<RateLimiter>,
}

impl CompletionClient {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>, policy: RetryPolicy, limiter: Arc<RateLimiter>) -> Self {
        Self {
            endpoint,
            policy,
            limiter,
        }
    }

    /// Client with no rate limit and no backoff delay, for mocks.
    pub fn immediate(endpoint: Arc<dyn ChatEndpoint>) -> Self {
        Self::new(
            endpoint,
            RetryPolicy::immediate(3),
            Arc::new(RateLimiter::unlimited()),
        )
    }

    pub fn model(&self) -> &str {
        self.endpoint.model()
    }

    pub fn supports_guided(&self) -> bool {
        self.endpoint.supports_guided()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<Completion, ClientError> {
        let max = self.policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.endpoint.chat(request)
            };
            match result {
                Ok(content) => {
                    return Ok(Completion {
                        content,
                        attempts: attempt,
                    })
                }
                Err(e) if e.is_transient() => {
                    if attempt >= max {
                        return Err(ClientError::Exhausted {
                            attempts: attempt,
                            last: e,
                        });
                    }
                    std::thread::sleep(self.policy.delay(attempt));
                }
                Err(e) => {
                    return Err(ClientError::Permanent {
                        attempts: attempt,
                        error: e,
                    })
                }
            }
        }
    }
}

/// Replays a fixed sequence of outcomes, then repeats the last one.
pub struct ScriptedEndpoint {
    script: Mutex<VecDeque<Result<String, EndpointError>>>,
    last: Mutex<Option<Result<String, EndpointError>>>,
    calls: Mutex<u32>,
}

impl ScriptedEndpoint {
    pub fn new(script: Vec<Result<String, EndpointError>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            last: Mutex::new(None),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        *self.calls.lock().expect("poisoned")
    }
}

impl ChatEndpoint for ScriptedEndpoint {
    fn chat(&self, _request: &ChatRequest) -> Result<String, EndpointError> {
        *self.calls.lock().expect("poisoned") += 1;
        let next = self.script.lock().expect("poisoned").pop_front();
        let mut last = self.last.lock().expect("poisoned");
        match next {
            Some(r) => {
                *last = Some(r.clone());
                r
            }
            None => last
                .clone()
                .unwrap_or_else(|| Err(EndpointError::Malformed("empty script".into()))),
        }
    }

    fn model(&self) -> &str {
        "scripted"
    }
}

/// Endpoint backed by a closure.
pub struct FnEndpoint<F> {
    model: String,
    guided: bool,
    f: F,
}

impl<F> FnEndpoint<F>
where
    F: Fn(&ChatRequest) -> Result<String, EndpointError> + Send + Sync,
{
    pub fn new(model: impl Into<String>, f: F) -> Self {
        Self {
            model: model.into(),
            guided: false,
            f,
        }
    }

    pub fn with_guided(mut self, guided: bool) -> Self {
        self.guided = guided;
        self
    }
}

impl<F> ChatEndpoint for FnEndpoint<F>
where
    F: Fn(&ChatRequest) -> Result<String, EndpointError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<String, EndpointError> {
        (self.f)(request)
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn supports_guided(&self) -> bool {
        self.guided
    }
}
